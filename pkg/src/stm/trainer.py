"""Contrastive LoRA fine-tuning of the toy encoder and a finite-difference gradient check."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import (
    EncoderConfig,
    EncoderError,
    TripletBatch,
    adapter_grads,
    batch_loss_and_grads,
    effective_weights,
)
from .lora import LoraAdapter, init_adapter
from .tensor_store import Checkpoint


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 32
    epochs: int = 1
    warmup_steps: int = 100
    temperature: float = 1.0
    seed: int = 0
    weight_decay: float = 0.0
    lora_rank: int = 16
    lora_alpha: float = 32.0
    max_steps: int | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0 or self.warmup_steps < 0 or self.weight_decay < 0:
            raise ValueError("epochs, warmup_steps and weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class AdamW:
    """Adam with decoupled weight decay over a flat dict of float64 arrays."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in sorted(self.params):
            p, g = self.params[k], grads[k]
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup over ``warmup_steps`` optimizer steps, then constant."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


def _flat(adapter: LoraAdapter) -> dict[str, np.ndarray]:
    flat = {}
    for name, (a, b) in adapter.factors.items():
        flat[f"{name}.lora_A"] = a
        flat[f"{name}.lora_B"] = b
    return flat


def make_batches(triplets: Sequence[tuple], batch_size: int, rng: np.random.Generator) -> list[TripletBatch]:
    order = rng.permutation(len(triplets))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [triplets[i] for i in order[start : start + batch_size]]
        batches.append(TripletBatch(*(tuple(t[j] for t in chunk) for j in range(3))))
    return batches


def _triplets(data) -> list[tuple]:
    out = []
    for item in data:
        if isinstance(item, TripletBatch):
            out.extend(zip(item.queries, item.positives, item.negatives))
        else:
            out.append(tuple(item))
    return out


def train(
    base: Checkpoint,
    data: Sequence[TripletBatch] | Sequence[tuple],
    enc: EncoderConfig,
    tc: TrainConfig,
    exclude: tuple[str, ...] = (),
) -> tuple[LoraAdapter, list[tuple[int, float]]]:
    """Fine-tune a fresh LoRA adapter on triplets with the base frozen.

    ``data`` may be triplet batches or raw ``(query, positive, negative)``
    token-sequence tuples; either way the triplets are reshuffled into
    ``tc.batch_size`` batches every epoch from a generator seeded by ``tc.seed``.
    Returns the adapter and the loss trace ``[(step, loss), ...]``.
    """
    triplets = _triplets(data)
    if not triplets:
        raise ValueError("training data is empty")
    adapter = init_adapter(base, tc.lora_rank, tc.lora_alpha, seed=tc.seed, exclude=exclude)
    base_w = base.to_float64()
    params = _flat(adapter)
    opt = AdamW(params, tc.learning_rate, weight_decay=tc.weight_decay)
    rng = np.random.default_rng(tc.seed + 1)
    trace: list[tuple[int, float]] = []
    step = 0
    for _ in range(tc.epochs):
        for batch in make_batches(triplets, tc.batch_size, rng):
            if tc.max_steps is not None and step >= tc.max_steps:
                return adapter, trace
            w = dict(base_w)
            for name, (a, b) in adapter.factors.items():
                w[name] = base_w[name] + adapter.scale * (b @ a)
            loss, dense = batch_loss_and_grads(w, batch, enc, tc.temperature)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            grads = {}
            for name, (ga, gb) in adapter_grads(adapter, dense).items():
                grads[f"{name}.lora_A"] = ga
                grads[f"{name}.lora_B"] = gb
            opt.step(grads, warmup_lr(step, tc.learning_rate, tc.warmup_steps))
            trace.append((step, loss))
            step += 1
    return adapter, trace


def write_loss_trace(trace: list[tuple[int, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in trace:
            writer.writerow([step, repr(loss)])


def batch_loss(base: Checkpoint, adapter: LoraAdapter | None, batch: TripletBatch, enc: EncoderConfig, temperature=1.0) -> float:
    return batch_loss_and_grads(effective_weights(base, adapter), batch, enc, temperature, need_grads=False)[0]


def grad_check(
    base: Checkpoint,
    adapter: LoraAdapter,
    batch: TripletBatch,
    enc: EncoderConfig,
    eps: float = 1e-4,
    n_coords: int = 100,
    seed: int = 0,
    temperature: float = 1.0,
    floor: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference adapter gradients.

    Relative error is ``|g - f| / max(|g|, |f|, floor)`` over ``n_coords``
    coordinates sampled uniformly from all adapter entries. The floor keeps
    near-zero gradients, where central differences are all roundoff, from
    dominating the maximum.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    adapter = adapter.copy()
    base_w = base.to_float64()

    def loss_at() -> float:
        w = dict(base_w)
        for name, (a, b) in adapter.factors.items():
            w[name] = base_w[name] + adapter.scale * (b @ a)
        return batch_loss_and_grads(w, batch, enc, temperature, need_grads=False)[0]

    w = effective_weights(base, adapter)
    _, dense = batch_loss_and_grads(w, batch, enc, temperature)
    analytic = {}
    for name, (ga, gb) in adapter_grads(adapter, dense).items():
        analytic[f"{name}.lora_A"] = ga
        analytic[f"{name}.lora_B"] = gb
    flat = _flat(adapter)
    keys = sorted(flat)
    sizes = np.array([flat[k].size for k in keys])
    rng = np.random.default_rng(seed)
    picks = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for flat_idx in sorted(picks):
        ki = int(np.searchsorted(bounds, flat_idx, side="right"))
        local = flat_idx - (bounds[ki - 1] if ki else 0)
        arr = flat[keys[ki]].reshape(-1)
        orig = arr[local]
        arr[local] = orig + eps
        up = loss_at()
        arr[local] = orig - eps
        down = loss_at()
        arr[local] = orig
        numeric = (up - down) / (2 * eps)
        g = analytic[keys[ki]].reshape(-1)[local]
        err = abs(g - numeric) / max(abs(g), abs(numeric), floor)
        worst = max(worst, err)
    return worst


__all__ = [
    "AdamW",
    "EncoderError",
    "TrainConfig",
    "TrainingDiverged",
    "batch_loss",
    "grad_check",
    "make_batches",
    "train",
    "warmup_lr",
    "write_loss_trace",
]
