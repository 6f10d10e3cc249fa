"""Pipeline configuration and the file-level steps behind the ``stm`` command."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .encoder import EncoderConfig, Tokenizer, init_base_params
from .evaluate import evaluate_model
from .lora import apply_adapter, save_adapter
from .merge import MergeRecipe, merge
from .metrics import MetricReport, format_table
from .synth import SPLITS, PromptPool, RetrievalSet, assign_prompts, generate_toy_sets, load_set, save_set
from .sweep import DENSITY_GRID, WEIGHT_GRID, Leaderboard, SweepPlan, run_sweep, subsample_sets
from .tensor_store import Checkpoint, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train, write_loss_trace

POOLED = "pooled"
BASE = "base"
MODELS = (*SPLITS, POOLED)
DISPLAY = {
    "base": "Base",
    "med_synth": "Med-Synth",
    "med_real": "Med-Real",
    "search": "Search",
    "nlu": "NLU",
    "pooled": "FT-all",
    "ties": "STM-Ties",
    "linear": "STM-Linear",
    "task_arithmetic": "STM-TaskArith",
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


class PipelineError(RuntimeError):
    """Missing inputs or a failed pipeline step."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsSection(_Section):
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"


class DataSection(_Section):
    topics_per_split: int = Field(4, ge=1)
    pairs_per_split: int = Field(500, ge=1)
    queries_per_topic: int = Field(10, ge=1)
    docs_per_topic: int = Field(5, ge=1)
    # name of a shipped prompt pool ("baseline", "generic", "gepa-light", ...) or none
    prompt_pool: Optional[str] = None
    # keep only the first N triplets of every training split (data-size ablation)
    max_pairs: Optional[int] = Field(None, ge=1)


class EncoderSection(_Section):
    vocab_size: int = Field(512, gt=2)
    dim: int = Field(32, ge=1)
    n_layers: int = Field(1, ge=0)
    max_len: int = Field(16, ge=2)
    mask_mode: Literal["causal", "bidirectional"] = "bidirectional"
    pooling: Literal["eos", "mean"] = "eos"
    ffn_dim: int = Field(64, ge=1)


class TrainSection(_Section):
    learning_rate: float = Field(1e-3, gt=0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(10, ge=0)
    warmup_steps: int = Field(10, ge=0)
    temperature: float = Field(1.0, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    lora_rank: int = Field(16, ge=1)
    lora_alpha: float = Field(32.0, gt=0)
    exclude: list[str] = Field(default_factory=list)


class SweepSection(_Section):
    methods: list[Literal["linear", "task_arithmetic", "ties"]] = Field(default_factory=lambda: ["linear", "ties"], min_length=1)
    strategy: Literal["full", "random", "coordinate"] = "coordinate"
    budget: int = Field(500, ge=1)
    n_random: int = Field(50, ge=1)
    rounds: int = Field(20, ge=1)
    weight_grid: list[float] = Field(default_factory=lambda: list(WEIGHT_GRID), min_length=1)
    density_grid: list[float] = Field(default_factory=lambda: list(DENSITY_GRID), min_length=1)
    dev_query_frac: float = Field(1.0, gt=0, le=1)
    dev_doc_frac: float = Field(1.0, gt=0, le=1)

    @model_validator(mode="after")
    def _grids_in_range(self):
        if any(not 0.0 <= w <= 1.0 for w in self.weight_grid):
            raise ValueError("weight_grid values must lie in [0, 1]")
        if any(not 0.0 < d <= 1.0 for d in self.density_grid):
            raise ValueError("density_grid values must lie in (0, 1]")
        return self


class PipelineConfig(_Section):
    seed: int = Field(0, ge=0)
    paths: PathsSection = Field(default_factory=PathsSection)
    data: DataSection = Field(default_factory=DataSection)
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    train: TrainSection = Field(default_factory=TrainSection)
    sweep: SweepSection = Field(default_factory=SweepSection)

    @model_validator(mode="after")
    def _vocab_fits_topics(self):
        need = 8 * self.data.topics_per_split * len(SPLITS) + 2
        if self.encoder.vocab_size < need:
            raise ValueError(f"encoder.vocab_size must be >= {need} for {self.data.topics_per_split} topics per split")
        return self

    # -- derived objects ---------------------------------------------------------

    def config_hash(self) -> str:
        """Digest of everything that shapes results (output paths excluded)."""
        body = json.dumps(self.model_dump(exclude={"paths"}), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**self.encoder.model_dump())

    def train_config(self) -> TrainConfig:
        t = self.train.model_dump(exclude={"exclude"})
        return TrainConfig(seed=self.seed, **t)

    def sweep_plan(self, method: str) -> SweepPlan:
        s = self.sweep
        return SweepPlan(
            method=method,
            weight_grid=tuple(s.weight_grid),
            density_grid=tuple(s.density_grid),
            strategy=s.strategy,
            budget=s.budget,
            n_random=s.n_random,
            rounds=s.rounds,
            seed=self.seed,
        )

    def dirs(self) -> tuple[Path, Path, Path]:
        p = self.paths
        return Path(p.data_dir), Path(p.checkpoint_dir), Path(p.report_dir)


def _field_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict, **overrides) -> PipelineConfig:
    """Validate a config mapping; ``overrides`` are dotted paths such as ``sweep.budget``."""
    data = json.loads(json.dumps(data))  # deep copy
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{dotted}: parent is not a table")
        node[leaf] = value
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_field_errors(exc)) from None


def load_config(path: str | Path | None, **overrides) -> PipelineConfig:
    """Read TOML or JSON (chosen by extension, JSON if unknown) into a config."""
    if path is None:
        return parse_config({}, **overrides)
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return parse_config(data, **overrides)


# --- artifacts ----------------------------------------------------------------------------


def _stamp(cfg: PipelineConfig) -> dict[str, str]:
    return {"config_hash": cfg.config_hash(), "seed": str(cfg.seed)}


def _record(cfg: PipelineConfig, path: Path) -> None:
    """Add ``path`` to the manifest of its directory with its digest, config hash and seed."""
    manifest = path.parent / "manifest.json"
    entries = json.loads(manifest.read_text()) if manifest.exists() else {}
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    entries[path.name] = {"sha256": digest, **_stamp(cfg)}
    manifest.write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")


def _write_text(cfg: PipelineConfig, path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    _record(cfg, path)
    return path


def _write_ckpt(cfg: PipelineConfig, path: Path, ckpt: Checkpoint) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt.with_meta(**_stamp(cfg)), path)
    _record(cfg, path)
    return path


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing input {path} ({hint})")
    return path


def dataset_path(cfg: PipelineConfig, part: str, split: str) -> Path:
    return cfg.dirs()[0] / part / f"{split}.jsonl"


def checkpoint_path(cfg: PipelineConfig, name: str) -> Path:
    return cfg.dirs()[1] / f"{name}.ckpt"


def load_part(cfg: PipelineConfig, part: str) -> dict[str, RetrievalSet]:
    return {s: load_set(_need(dataset_path(cfg, part, s), "run gen-data first")) for s in SPLITS}


def load_model(cfg: PipelineConfig, name: str) -> Checkpoint:
    return load_checkpoint(_need(checkpoint_path(cfg, name), f"run train for {name!r} first"))


# --- steps -------------------------------------------------------------------------------


def gen_data(cfg: PipelineConfig) -> dict[str, dict[str, RetrievalSet]]:
    """Toy four-split data; with a prompt pool, every query gets a persisted prompt."""
    d = cfg.data
    toy = generate_toy_sets(d.topics_per_split, d.pairs_per_split, cfg.encoder.vocab_size, cfg.seed, d.queries_per_topic, d.docs_per_topic)
    parts = {"train": toy.train, "dev": toy.dev, "test": toy.test}
    if d.prompt_pool:
        try:
            pool = PromptPool.from_assets(d.prompt_pool)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"data.prompt_pool: {exc}") from None
        for i, (part, sets) in enumerate(sorted(parts.items())):
            for j, split in enumerate(SPLITS):
                rs = sets[split]
                rs.prompts = assign_prompts(rs.queries, pool, cfg.seed * 1000 + 10 * i + j)
    for part, sets in parts.items():
        for split, rs in sets.items():
            _write_text(cfg, dataset_path(cfg, part, split), rs.dumps())
    return parts


def _train_triplets(cfg: PipelineConfig, sets: dict[str, RetrievalSet], names) -> list[tuple]:
    tok = Tokenizer(cfg.encoder.vocab_size, cfg.encoder.max_len)
    out = []
    for name in names:
        rs = sets[name]
        rows = rs.triplets[: cfg.data.max_pairs] if cfg.data.max_pairs else rs.triplets
        out += [(tok.encode(rs.query_text(q)), tok.encode(rs.corpus[p]), tok.encode(rs.corpus[n])) for q, p, n in rows]
    return out


def base_model(cfg: PipelineConfig) -> Checkpoint:
    path = checkpoint_path(cfg, BASE)
    base = init_base_params(cfg.encoder_config(), cfg.seed)
    _write_ckpt(cfg, path, base)
    return load_checkpoint(path)


def train_model(cfg: PipelineConfig, name: str, train_sets: dict[str, RetrievalSet] | None = None) -> Checkpoint:
    """Train expert ``name`` (a split) or the pooled model; returns the dense checkpoint."""
    if name not in MODELS:
        raise ConfigError(f"split must be one of {MODELS}, got {name!r}")
    train_sets = train_sets if train_sets is not None else load_part(cfg, "train")
    base = base_model(cfg)
    triplets = _train_triplets(cfg, train_sets, SPLITS if name == POOLED else [name])
    adapter, trace = train(base, triplets, cfg.encoder_config(), cfg.train_config(), exclude=tuple(cfg.train.exclude))
    _, ckpt_dir, report_dir = cfg.dirs()
    report_dir.mkdir(parents=True, exist_ok=True)
    loss_path = report_dir / f"loss_{name}.csv"
    write_loss_trace(trace, loss_path)
    _record(cfg, loss_path)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    adapter_path = ckpt_dir / f"{name}.lora"
    save_adapter(adapter, adapter_path)
    _record(cfg, adapter_path)
    model = apply_adapter(base, adapter).with_meta(model_id=f"{name}-expert" if name != POOLED else "pooled", train_data=name)
    _write_ckpt(cfg, checkpoint_path(cfg, name), model)
    return load_checkpoint(checkpoint_path(cfg, name))


def merge_file(cfg: PipelineConfig, recipe_path: str | Path, out: str | Path | None = None) -> Path:
    try:
        recipe = MergeRecipe.from_json(Path(recipe_path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise PipelineError(f"cannot read recipe {recipe_path}: {exc.strerror}") from None
    experts = {e: load_model(cfg, e) for e in recipe.experts}
    base = load_model(cfg, BASE) if recipe.method != "linear" else None
    merged = merge(recipe, experts, base)
    out = Path(out) if out else checkpoint_path(cfg, f"merged-{recipe.method}")
    return _write_ckpt(cfg, out, merged)


def sweep_method(
    cfg: PipelineConfig,
    method: str,
    experts: dict[str, Checkpoint] | None = None,
    dev: dict[str, RetrievalSet] | None = None,
    workers: int = 1,
) -> Leaderboard:
    experts = experts if experts is not None else {s: load_model(cfg, s) for s in SPLITS}
    dev = dev if dev is not None else load_part(cfg, "dev")
    dev = subsample_sets(dev, cfg.sweep.dev_query_frac, cfg.sweep.dev_doc_frac, cfg.seed)
    base = load_model(cfg, BASE) if method != "linear" else None
    board = run_sweep(experts, base, cfg.sweep_plan(method), dev, cfg.encoder_config(), workers=workers)
    board.meta.update(_stamp(cfg))
    report_dir = cfg.dirs()[2]
    _write_text(cfg, report_dir / f"leaderboard_{method}.json", board.to_json())
    _write_text(cfg, report_dir / f"leaderboard_{method}.csv", board.to_csv())
    return board


def eval_checkpoint(cfg: PipelineConfig, ckpt_path: str | Path, part: str = "test") -> MetricReport:
    ckpt_path = Path(ckpt_path)
    ckpt = load_checkpoint(_need(ckpt_path, "checkpoint"))
    report = evaluate_model(ckpt, load_part(cfg, part), cfg.encoder_config())
    stem = f"eval_{ckpt_path.stem}_{part}"
    body = {"checkpoint": ckpt_path.name, "dataset": part, **_stamp(cfg), "report": report.to_dict()}
    report_dir = cfg.dirs()[2]
    _write_text(cfg, report_dir / f"{stem}.json", json.dumps(body, indent=2, sort_keys=True) + "\n")
    _write_text(cfg, report_dir / f"{stem}.txt", report.to_table())
    return report


# --- full pipeline ------------------------------------------------------------------------


def _summary_rows(rows: list[tuple[str, MetricReport]], metric: str = "ndcg@10") -> str:
    table = [["Model", "Avg Medical", "Avg General", "Avg All"]]
    for label, rep in rows:
        agg = rep.aggregates[metric]
        table.append([label, *(f"{agg[k]:.3f}" for k in ("avg_medical", "avg_general", "avg_all"))])
    return format_table(table)


def run_stm(cfg: PipelineConfig, workers: int = 1, methods: list[str] | None = None) -> dict:
    """Generate data, train four experts and a pooled model, sweep merges, report.

    The report (``stm_report.json`` and ``stm_report.txt`` in the report dir)
    holds dev and test averages for every expert, the pooled model and the
    best recipe per merge method, plus the chosen coefficients. It contains no
    timestamps, so equal configs give byte-identical reports.
    """
    methods = list(methods or cfg.sweep.methods)
    parts = gen_data(cfg)
    enc = cfg.encoder_config()
    base = base_model(cfg)
    models: dict[str, Checkpoint] = {BASE: base}
    for name in MODELS:
        models[name] = train_model(cfg, name, parts["train"])
    experts = {s: models[s] for s in SPLITS}
    boards = {m: sweep_method(cfg, m, experts, parts["dev"], workers) for m in methods}
    for m, board in boards.items():
        best = board.best.recipe
        models[m] = merge(best, experts, base)
        _write_ckpt(cfg, checkpoint_path(cfg, f"stm-{m}"), models[m])

    order = [BASE, *SPLITS, POOLED, *methods]
    reports = {part: {n: evaluate_model(models[n], parts[part], enc) for n in order} for part in ("dev", "test")}
    body = {
        **_stamp(cfg),
        "config": cfg.model_dump(exclude={"paths"}),
        "models": {
            n: {part: reports[part][n].to_dict() for part in ("dev", "test")} for n in order
        },
        "best_recipes": {m: boards[m].best.recipe.to_dict() for m in methods},
        "sweep_evaluations": {m: len(boards[m].rows) for m in methods},
    }
    lines = [f"STM report  config_hash={cfg.config_hash()}  seed={cfg.seed}", ""]
    for part in ("test", "dev"):
        lines.append(f"{part} NDCG@10")
        lines.append(_summary_rows([(DISPLAY[n], reports[part][n]) for n in order]))
    lines.append("merge coefficients (weights; densities for ties)")
    coef = [["Method", *(DISPLAY[s] for s in SPLITS), "Evaluated"]]
    for m in methods:
        r = boards[m].best.recipe
        cells = [f"{w:.1f}" + (f"/{d:.1f}" if r.densities else "") for w, d in zip(r.weights, r.densities or [None] * len(r.weights))]
        coef.append([DISPLAY[m], *cells, str(len(boards[m].rows))])
    lines.append(format_table(coef))
    report_dir = cfg.dirs()[2]
    _write_text(cfg, report_dir / "stm_report.json", json.dumps(body, indent=2, sort_keys=True) + "\n")
    _write_text(cfg, report_dir / "stm_report.txt", "\n".join(lines))
    return body


def headline(body: dict, part: str = "dev", metric: str = "ndcg@10") -> dict[str, float]:
    """``avg_all`` per model from an :func:`run_stm` report body."""
    return {n: v[part]["aggregates"][metric]["avg_all"] for n, v in body["models"].items()}


__all__ = [
    "ConfigError",
    "PipelineConfig",
    "PipelineError",
    "eval_checkpoint",
    "gen_data",
    "headline",
    "load_config",
    "merge_file",
    "parse_config",
    "run_stm",
    "sweep_method",
    "train_model",
]
