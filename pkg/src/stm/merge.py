"""Parameter-space merging: linear, task arithmetic and Ties.

All arithmetic is carried out in float64 and rounded to float32 once when the
result checkpoint is built.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor_store import Checkpoint, CheckpointError, assert_compatible

METHODS = ("linear", "task_arithmetic", "ties")
TIES_AGGREGATION = "alpha_weighted_mean_over_sign_agreeing"


class MergeError(ValueError):
    pass


@dataclass(frozen=True)
class TaskVector:
    """Checkpoint-shaped delta from a base.

    ``delta`` is the float32 view; ``exact`` optionally keeps the float64
    values it was rounded from so merges do not round twice.
    """

    delta: Checkpoint
    base_id: str = ""
    exact: dict | None = field(default=None, compare=False, repr=False)

    def array(self, name: str) -> np.ndarray:
        if self.exact is not None:
            return self.exact[name]
        return self.delta[name].astype(np.float64)


@dataclass
class MergeRecipe:
    method: str
    experts: list[str]
    weights: list[float]
    densities: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.method not in METHODS:
            raise MergeError(f"unknown merge method {self.method!r}; expected one of {METHODS}")
        self.weights = [float(w) for w in self.weights]
        self.densities = [float(d) for d in self.densities]
        if len(self.weights) != len(self.experts):
            raise MergeError(f"{len(self.weights)} weights for {len(self.experts)} experts")
        if len(set(self.experts)) != len(self.experts):
            raise MergeError("expert ids must be unique")
        _check_weights(self.weights)
        if self.method == "ties":
            if len(self.densities) != len(self.experts):
                raise MergeError(f"ties needs one density per expert, got {len(self.densities)}")
            _check_densities(self.densities)
        elif self.densities:
            raise MergeError(f"densities are only meaningful for ties, not {self.method!r}")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "experts": list(self.experts),
            "weights": list(self.weights),
            "densities": list(self.densities),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> MergeRecipe:
        try:
            return cls(
                method=data["method"],
                experts=list(data["experts"]),
                weights=list(data["weights"]),
                densities=list(data.get("densities", [])),
            )
        except KeyError as exc:
            raise MergeError(f"recipe missing field {exc.args[0]!r}") from exc

    @classmethod
    def from_json(cls, text: str) -> MergeRecipe:
        return cls.from_dict(json.loads(text))

    def sort_key(self) -> tuple:
        return (self.method, tuple(self.experts), tuple(self.weights), tuple(self.densities))


def _check_weights(weights) -> None:
    for w in weights:
        if not (0.0 <= w <= 1.0) or math.isnan(w):
            raise MergeError(f"weight {w} outside [0, 1]")


def _check_densities(densities) -> None:
    for d in densities:
        if not (0.0 < d <= 1.0):
            raise MergeError(f"density {d} outside (0, 1]")


def _order(n: int, ids) -> list[int]:
    # Accumulation order is fixed by expert id so permuted inputs sum identically.
    if ids is None:
        return list(range(n))
    if len(ids) != n:
        raise MergeError("ids length must match experts")
    return sorted(range(n), key=lambda i: ids[i])


def linear_merge(experts: list[Checkpoint], weights: list[float], ids: list[str] | None = None) -> Checkpoint:
    """Weighted sum of full parameter sets; weights are used as given (no renormalization)."""
    if not experts:
        raise MergeError("need at least one expert")
    if len(weights) != len(experts):
        raise MergeError(f"{len(weights)} weights for {len(experts)} experts")
    _check_weights(weights)
    assert_compatible(experts)
    order = _order(len(experts), ids)
    out = {}
    for name in experts[0]:
        acc = None
        for k in order:
            if weights[k] == 0.0:
                continue
            term = float(weights[k]) * experts[k][name].astype(np.float64)
            # starting from the first term (not zeros) keeps -0.0 entries bit-exact
            acc = term if acc is None else acc + term
        out[name] = np.zeros(experts[0][name].shape) if acc is None else acc
    return Checkpoint(out)


def task_vector(expert: Checkpoint, base: Checkpoint, base_id: str = "") -> TaskVector:
    assert_compatible([expert, base])
    delta = {k: expert[k].astype(np.float64) - base[k].astype(np.float64) for k in base}
    return TaskVector(Checkpoint(delta), base_id or base.meta.get("model_id", ""), delta)


def _check_taus(base: Checkpoint, taus: list[TaskVector]) -> None:
    if not taus:
        raise MergeError("need at least one task vector")
    assert_compatible([base] + [t.delta for t in taus])


def task_arithmetic_merge(
    base: Checkpoint, taus: list[TaskVector], weights: list[float], ids: list[str] | None = None
) -> Checkpoint:
    """``base + sum_k weights[k] * taus[k]``."""
    _check_taus(base, taus)
    if len(weights) != len(taus):
        raise MergeError(f"{len(weights)} weights for {len(taus)} task vectors")
    _check_weights(weights)
    order = _order(len(taus), ids)
    out = {}
    for name in base:
        acc = base[name].astype(np.float64)
        for k in order:
            if weights[k] != 0.0:
                acc = acc + float(weights[k]) * taus[k].array(name)
        out[name] = acc
    return Checkpoint(out)


def _keep_count(density: float, n: int) -> int:
    # round() guards against products like 0.7 * 10 = 7.000000000000001
    return min(n, max(1, math.ceil(round(density * n, 9))))


def _trim_array(values: np.ndarray, density: float) -> np.ndarray:
    flat = values.reshape(-1)
    keep = _keep_count(density, flat.size)
    out = np.zeros_like(flat)
    if keep >= flat.size:
        return values.copy()
    # stable sort keeps the lower flat index first among equal magnitudes
    idx = np.argsort(-np.abs(flat), kind="stable")[:keep]
    out[idx] = flat[idx]
    return out.reshape(values.shape)


def trim(tau: TaskVector, density: float) -> TaskVector:
    """Keep the ceil(density * n) largest-magnitude entries of each tensor; zero the rest."""
    _check_densities([density])
    trimmed = {k: _trim_array(tau.array(k), density) for k in tau.delta}
    return TaskVector(Checkpoint(trimmed), tau.base_id, trimmed)


def _weighted_sum(arrays: list[np.ndarray], weights, order) -> np.ndarray:
    acc = np.zeros(arrays[0].shape, dtype=np.float64)
    for k in order:
        acc += float(weights[k]) * arrays[k]
    return acc


def elect_sign(trimmed: list[TaskVector], weights: list[float], ids: list[str] | None = None) -> dict[str, np.ndarray]:
    """Per entry, the sign of the weighted sum of trimmed deltas (0 on exact cancellation)."""
    if not trimmed:
        raise MergeError("need at least one task vector")
    if len(weights) != len(trimmed):
        raise MergeError(f"{len(weights)} weights for {len(trimmed)} task vectors")
    assert_compatible([t.delta for t in trimmed])
    order = _order(len(trimmed), ids)
    mask = {}
    for name in trimmed[0].delta:
        arrays = [t.array(name) for t in trimmed]
        mask[name] = np.sign(_weighted_sum(arrays, weights, order)).astype(np.int8)
    return mask


def ties_merge(
    base: Checkpoint,
    taus: list[TaskVector],
    weights: list[float],
    densities: list[float],
    ids: list[str] | None = None,
) -> Checkpoint:
    """Trim each task vector, elect a sign per entry, and average the agreeing deltas.

    The merged delta at an entry is the weight-normalized mean of the trimmed
    deltas whose sign matches the elected one; entries with elected sign 0
    keep the base value.
    """
    _check_taus(base, taus)
    if not (len(weights) == len(densities) == len(taus)):
        raise MergeError("taus, weights and densities must have equal length")
    _check_weights(weights)
    _check_densities(densities)
    if all(w == 0.0 for w in weights):
        raise MergeError("degenerate recipe: all ties weights are zero")
    order = _order(len(taus), ids)
    trimmed = [trim(t, d) for t, d in zip(taus, densities)]
    signs = elect_sign(trimmed, weights, ids)
    out = {}
    for name in base:
        arrays = [t.array(name) for t in trimmed]
        elected = signs[name]
        num = np.zeros(elected.shape, dtype=np.float64)
        den = np.zeros(elected.shape, dtype=np.float64)
        for k in order:
            agree = (np.sign(arrays[k]) == elected) & (elected != 0)
            w = float(weights[k])
            num += np.where(agree, w * arrays[k], 0.0)
            den += np.where(agree, w, 0.0)
        merged = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        out[name] = base[name].astype(np.float64) + merged
    return Checkpoint(out)


def merge(recipe: MergeRecipe, experts: dict[str, Checkpoint], base: Checkpoint | None = None) -> Checkpoint:
    """Apply a recipe to named experts; the result's metadata records the recipe."""
    missing = [e for e in recipe.experts if e not in experts]
    if missing:
        raise MergeError(f"unknown experts in recipe: {missing}")
    ckpts = [experts[e] for e in recipe.experts]
    ids = list(recipe.experts)
    meta = {"merge_recipe": recipe.to_json()}
    if recipe.method == "linear":
        merged = linear_merge(ckpts, recipe.weights, ids)
    else:
        if base is None:
            raise MergeError(f"{recipe.method} needs a base checkpoint")
        taus = [task_vector(c, base) for c in ckpts]
        if recipe.method == "task_arithmetic":
            merged = task_arithmetic_merge(base, taus, recipe.weights, ids)
        else:
            merged = ties_merge(base, taus, recipe.weights, recipe.densities, ids)
            meta["ties_aggregation"] = TIES_AGGREGATION
    return merged.with_meta(**meta)


__all__ = [
    "CheckpointError",
    "MergeError",
    "MergeRecipe",
    "TaskVector",
    "elect_sign",
    "linear_merge",
    "merge",
    "task_arithmetic_merge",
    "task_vector",
    "ties_merge",
    "trim",
]
