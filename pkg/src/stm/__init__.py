"""Synthesize-Train-Merge: toy dense-retrieval experts, LoRA fine-tuning and model merging."""

from .encoder import EncoderConfig, Tokenizer, TripletBatch, cosine_sim, encode, info_nce_loss, init_base_params
from .evaluate import evaluate_model
from .lora import LoraAdapter, apply_adapter, init_adapter, materialize_delta
from .merge import MergeRecipe, TaskVector, elect_sign, linear_merge, merge, task_arithmetic_merge, task_vector, ties_merge, trim
from .metrics import MetricReport, aggregate, ndcg_at_k, recall_at_k, retrieve_topk
from .sweep import Leaderboard, SweepPlan, enumerate_recipes, run_sweep, subsample_devset
from .synth import PromptPool, RetrievalSet, assign_prompts, generate_toy_sets, render_hard_negative_prompt, request_negative
from .tensor_store import Checkpoint, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, grad_check, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "EncoderConfig",
    "Leaderboard",
    "LoraAdapter",
    "MergeRecipe",
    "MetricReport",
    "PromptPool",
    "RetrievalSet",
    "SweepPlan",
    "TaskVector",
    "Tokenizer",
    "TrainConfig",
    "TripletBatch",
    "aggregate",
    "apply_adapter",
    "assign_prompts",
    "cosine_sim",
    "elect_sign",
    "encode",
    "enumerate_recipes",
    "evaluate_model",
    "generate_toy_sets",
    "grad_check",
    "info_nce_loss",
    "init_adapter",
    "init_base_params",
    "linear_merge",
    "load_checkpoint",
    "materialize_delta",
    "merge",
    "ndcg_at_k",
    "recall_at_k",
    "render_hard_negative_prompt",
    "request_negative",
    "retrieve_topk",
    "run_sweep",
    "save_checkpoint",
    "subsample_devset",
    "task_arithmetic_merge",
    "task_vector",
    "ties_merge",
    "train",
    "trim",
]
