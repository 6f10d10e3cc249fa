"""Low-rank adapters over the rank-2 tensors of a checkpoint."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .merge import TaskVector
from .tensor_store import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint

INIT_STD = 0.02


class AdapterError(ValueError):
    pass


@dataclass
class LoraAdapter:
    """Per-target factors ``(A [r x in], B [out x r])``; delta = (alpha_lora / rank) * B @ A."""

    factors: dict[str, tuple[np.ndarray, np.ndarray]]
    rank: int
    alpha_lora: float

    def __post_init__(self):
        if self.rank < 1:
            raise AdapterError(f"rank must be positive, got {self.rank}")
        if not self.alpha_lora > 0:
            raise AdapterError(f"alpha_lora must be positive, got {self.alpha_lora}")
        for name, (a, b) in self.factors.items():
            if a.shape[0] != self.rank or b.shape[1] != self.rank:
                raise AdapterError(f"{name}: factor shapes {a.shape}, {b.shape} inconsistent with rank {self.rank}")
            if self.rank > min(b.shape[0], a.shape[1]):
                raise AdapterError(f"{name}: rank {self.rank} exceeds min dimension of {(b.shape[0], a.shape[1])}")

    @property
    def scale(self) -> float:
        return self.alpha_lora / self.rank

    @property
    def targets(self) -> list[str]:
        return sorted(self.factors)

    def copy(self) -> LoraAdapter:
        return LoraAdapter({k: (a.copy(), b.copy()) for k, (a, b) in self.factors.items()}, self.rank, self.alpha_lora)

    def to_checkpoint(self) -> Checkpoint:
        entries = {}
        for name, (a, b) in self.factors.items():
            entries[f"{name}.lora_A"] = a
            entries[f"{name}.lora_B"] = b
        return Checkpoint(entries, {"rank": str(self.rank), "alpha_lora": repr(float(self.alpha_lora))})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> LoraAdapter:
        try:
            rank = int(ckpt.meta["rank"])
            alpha = float(ckpt.meta["alpha_lora"])
        except KeyError as exc:
            raise AdapterError(f"adapter metadata missing {exc.args[0]!r}") from exc
        factors = {}
        for key in ckpt:
            if key.endswith(".lora_A"):
                name = key[: -len(".lora_A")]
                if f"{name}.lora_B" not in ckpt:
                    raise AdapterError(f"{name}: lora_A without lora_B")
                factors[name] = (ckpt[key].astype(np.float64), ckpt[f"{name}.lora_B"].astype(np.float64))
            elif not key.endswith(".lora_B"):
                raise AdapterError(f"unexpected tensor {key!r} in adapter file")
        return cls(factors, rank, alpha)


def save_adapter(adapter: LoraAdapter, path: str | Path) -> None:
    save_checkpoint(adapter.to_checkpoint(), path)


def load_adapter(path: str | Path) -> LoraAdapter:
    return LoraAdapter.from_checkpoint(load_checkpoint(path))


def init_adapter(
    base: Checkpoint, rank: int = 16, alpha_lora: float = 32.0, seed: int = 0, exclude: tuple[str, ...] = ()
) -> LoraAdapter:
    """Target every rank-2 tensor not in ``exclude``; A ~ N(0, 0.02^2), B = 0."""
    targets = [k for k, v in base.items() if v.ndim == 2 and k not in exclude]
    if not targets:
        raise AdapterError("base has no rank-2 tensor to adapt")
    rng = np.random.default_rng(seed)
    factors = {}
    for name in targets:
        out_dim, in_dim = base[name].shape
        if rank > min(out_dim, in_dim):
            raise AdapterError(f"rank {rank} exceeds min dimension of {name!r} {base[name].shape}")
        a = rng.normal(0.0, INIT_STD, size=(rank, in_dim))
        factors[name] = (a, np.zeros((out_dim, rank)))
    return LoraAdapter(factors, rank, alpha_lora)


def dense_deltas(adapter: LoraAdapter) -> dict[str, np.ndarray]:
    """Float64 ``scale * B @ A`` for each target."""
    return {name: adapter.scale * (b @ a) for name, (a, b) in adapter.factors.items()}


def materialize_delta(adapter: LoraAdapter, base: Checkpoint) -> TaskVector:
    """Full-shape delta against ``base``: the adapter product on targets, zeros elsewhere."""
    deltas = dense_deltas(adapter)
    entries = {}
    for name, value in base.items():
        if name in deltas:
            if deltas[name].shape != value.shape:
                raise CheckpointError(f"adapter target {name!r} has shape {deltas[name].shape}, base {value.shape}")
            entries[name] = deltas[name]
        else:
            entries[name] = np.zeros(value.shape)
    unknown = set(deltas) - set(base)
    if unknown:
        raise CheckpointError(f"adapter targets missing from base: {sorted(unknown)}")
    return TaskVector(Checkpoint(entries), base.meta.get("model_id", ""), entries)


def apply_adapter(base: Checkpoint, adapter: LoraAdapter) -> Checkpoint:
    """Fold the adapter into ``base`` (float64 sum, single rounding to float32)."""
    deltas = dense_deltas(adapter)
    unknown = set(deltas) - set(base)
    if unknown:
        raise CheckpointError(f"adapter targets missing from base: {sorted(unknown)}")
    out = {}
    for name, value in base.items():
        if name in deltas:
            if deltas[name].shape != value.shape:
                raise CheckpointError(f"adapter target {name!r} has shape {deltas[name].shape}, base {value.shape}")
            out[name] = value.astype(np.float64) + deltas[name] if deltas[name].any() else value
        else:
            out[name] = value
    return Checkpoint(out, base.meta)
