"""Grid search over merge recipes, scored by dev-set NDCG@10."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .encoder import EncoderConfig
from .evaluate import score_sets
from .merge import MergeRecipe, merge
from .metrics import aggregate
from .synth import RetrievalSet
from .tensor_store import Checkpoint

WEIGHT_GRID = tuple(round(0.1 * i, 1) for i in range(10))
DENSITY_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))
STRATEGIES = ("full", "random", "coordinate")
PRIMARY_METRIC = "ndcg@10"


class SweepError(ValueError):
    pass


@dataclass
class SweepPlan:
    method: str = "linear"
    weight_grid: tuple[float, ...] = WEIGHT_GRID
    density_grid: tuple[float, ...] = DENSITY_GRID
    strategy: str = "coordinate"
    budget: int = 500
    n_random: int = 50
    rounds: int = 20
    seed: int = 0

    def __post_init__(self):
        self.weight_grid = tuple(float(w) for w in self.weight_grid)
        self.density_grid = tuple(float(d) for d in self.density_grid)
        if self.method not in ("linear", "task_arithmetic", "ties"):
            raise SweepError(f"unknown method {self.method!r}")
        if self.strategy not in STRATEGIES:
            raise SweepError(f"strategy must be one of {STRATEGIES}")
        if self.budget < 1:
            raise SweepError("budget must be >= 1")
        if not self.weight_grid or (self.method == "ties" and not self.density_grid):
            raise SweepError("grids must be non-empty")
        if self.n_random < 1 or self.rounds < 1:
            raise SweepError("n_random and rounds must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weight_grid"] = list(self.weight_grid)
        d["density_grid"] = list(self.density_grid)
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> SweepPlan:
        return cls(**dict(data))


def _recipe(plan: SweepPlan, ids: Sequence[str], weights, densities=()) -> MergeRecipe:
    return MergeRecipe(plan.method, list(ids), list(weights), list(densities) if plan.method == "ties" else [])


def _axes(plan: SweepPlan, k: int) -> list[tuple[float, ...]]:
    axes = [plan.weight_grid] * k
    if plan.method == "ties":
        axes += [plan.density_grid] * k
    return axes


def _split(plan: SweepPlan, point: Sequence[float], k: int):
    return point[:k], point[k:]


def _full(plan: SweepPlan, ids: Sequence[str]) -> Iterator[MergeRecipe]:
    k = len(ids)
    for point in itertools.product(*_axes(plan, k)):
        w, d = _split(plan, point, k)
        if any(x != 0.0 for x in w):
            yield _recipe(plan, ids, w, d)


def _random(plan: SweepPlan, ids: Sequence[str]) -> Iterator[MergeRecipe]:
    k = len(ids)
    axes = _axes(plan, k)
    sizes = [len(a) for a in axes]
    valid = math.prod(sizes) - (1 if 0.0 in plan.weight_grid else 0) * math.prod(sizes[k:])
    target = min(plan.n_random, valid)
    rng = np.random.default_rng(plan.seed)
    seen: set[tuple[int, ...]] = set()
    while len(seen) < target:
        idx = tuple(int(rng.integers(s)) for s in sizes)
        if idx in seen:
            continue
        point = [axes[i][j] for i, j in enumerate(idx)]
        w, d = _split(plan, point, k)
        if all(x == 0.0 for x in w):
            continue
        seen.add(idx)
        yield _recipe(plan, ids, w, d)


def _nearest(grid: Sequence[float], value: float) -> float:
    return min(grid, key=lambda g: (abs(g - value), g))


def _coordinate(
    plan: SweepPlan, ids: Sequence[str], score_batch: Callable[[list[MergeRecipe]], list[float | None]]
) -> Iterator[MergeRecipe]:
    k = len(ids)
    axes = _axes(plan, k)
    point = [_nearest(a, 0.5) for a in axes]
    scores: dict[tuple, float] = {}
    evaluated = 0

    def valid(p) -> bool:
        return any(x != 0.0 for x in p[:k])

    def run(points):
        nonlocal evaluated
        fresh = [p for p in dict.fromkeys(points) if p not in scores and valid(p)]
        fresh = fresh[: plan.budget - evaluated]
        if not fresh:
            return []
        recipes = [_recipe(plan, ids, *_split(plan, p, k)) for p in fresh]
        for p, s in zip(fresh, score_batch(recipes)):
            scores[p] = -math.inf if s is None else s
        evaluated += len(fresh)
        return recipes

    yield from run([tuple(point)])
    best = scores.get(tuple(point), -math.inf)
    for _ in range(plan.rounds):
        improved = False
        for axis in range(len(axes)):
            candidates = [tuple(point[:axis] + [v] + point[axis + 1 :]) for v in axes[axis]]
            yield from run(candidates)
            for cand in candidates:
                s = scores.get(cand, -math.inf)
                if s > best:
                    best, point, improved = s, list(cand), True
            if evaluated >= plan.budget:
                return
        if not improved:
            return


def enumerate_recipes(
    plan: SweepPlan,
    expert_ids: Sequence[str],
    score_batch: Callable[[list[MergeRecipe]], list[float | None]] | None = None,
) -> Iterator[MergeRecipe]:
    """Deterministic stream of at most ``plan.budget`` distinct recipes.

    ``full`` walks the Cartesian grid (skipping all-zero weights), ``random``
    samples it without replacement, and ``coordinate`` starts from all-0.5 and
    optimizes one coefficient at a time; it needs ``score_batch`` to steer and
    calls it on each new batch of candidates before yielding them.
    """
    if not expert_ids:
        raise SweepError("need at least one expert")
    if plan.strategy == "coordinate":
        if score_batch is None:
            raise SweepError("coordinate strategy needs a score_batch callback")
        yield from _coordinate(plan, list(expert_ids), score_batch)
        return
    stream = _full(plan, expert_ids) if plan.strategy == "full" else _random(plan, expert_ids)
    yield from itertools.islice(stream, plan.budget)


def _ceil_frac(frac: float, n: int) -> int:
    return min(n, max(1, math.ceil(round(frac * n, 9))))


def subsample_devset(rs: RetrievalSet, query_frac: float, doc_frac: float, seed: int) -> RetrievalSet:
    """Seeded query/doc subsample; sampled queries keep all their positive documents."""
    for frac in (query_frac, doc_frac):
        if not 0.0 < frac <= 1.0:
            raise SweepError("fractions must be in (0, 1]")
    rng = np.random.default_rng(seed)
    qids = sorted(rs.queries)
    dids = sorted(rs.corpus)
    if not qids or not dids:
        raise SweepError("empty retrieval set")
    q_keep = sorted(qids[i] for i in rng.choice(len(qids), _ceil_frac(query_frac, len(qids)), replace=False))
    d_keep = {dids[i] for i in rng.choice(len(dids), _ceil_frac(doc_frac, len(dids)), replace=False)}
    for q in q_keep:
        d_keep.update(d for d, r in rs.qrels.get(q, {}).items() if r > 0)
    q_set = set(q_keep)
    qrels = {q: {d: r for d, r in rs.qrels[q].items() if d in d_keep} for q in q_keep if q in rs.qrels}
    return RetrievalSet(
        corpus={d: rs.corpus[d] for d in sorted(d_keep)},
        queries={q: rs.queries[q] for q in q_keep},
        triplets=[t for t in rs.triplets if t[0] in q_set and t[1] in d_keep and t[2] in d_keep],
        qrels=qrels,
        split=rs.split,
        prompts={q: p for q, p in rs.prompts.items() if q in q_set},
    )


def subsample_sets(sets: Mapping[str, RetrievalSet], query_frac: float, doc_frac: float, seed: int) -> dict[str, RetrievalSet]:
    if query_frac == 1.0 and doc_frac == 1.0:
        return dict(sets)
    return {name: subsample_devset(rs, query_frac, doc_frac, seed) for name, rs in sets.items()}


@dataclass
class LeaderboardRow:
    recipe: MergeRecipe
    score: float | None
    per_dataset: dict[str, dict[str, float]] = field(default_factory=dict)
    error: str | None = None

    def to_dict(self) -> dict:
        return {"recipe": self.recipe.to_dict(), "score": self.score, "per_dataset": self.per_dataset, "error": self.error}

    @classmethod
    def from_dict(cls, d: Mapping) -> LeaderboardRow:
        return cls(MergeRecipe.from_dict(d["recipe"]), d["score"], d.get("per_dataset", {}), d.get("error"))


def _row_key(row: LeaderboardRow):
    return (row.score is None, -(row.score or 0.0), row.recipe.sort_key())


@dataclass
class Leaderboard:
    rows: list[LeaderboardRow]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=_row_key)

    @property
    def best(self) -> LeaderboardRow:
        ok = [r for r in self.rows if r.score is not None]
        if not ok:
            raise SweepError("no successful recipe in leaderboard")
        return ok[0]

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "rows": [r.to_dict() for r in self.rows]}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> Leaderboard:
        data = json.loads(text)
        return cls([LeaderboardRow.from_dict(r) for r in data["rows"]], data.get("meta", {}))

    def to_csv(self) -> str:
        """One row per recipe with per-expert weight (and density) columns."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if not self.rows:
            return ""
        ids = self.rows[0].recipe.experts
        header = ["method", *(f"weight_{e}" for e in ids)]
        ties = self.rows[0].recipe.method == "ties"
        if ties:
            header += [f"density_{e}" for e in ids]
        writer.writerow(header + ["score"])
        for row in self.rows:
            r = row.recipe
            cells = [r.method, *r.weights] + (list(r.densities) if ties else [])
            writer.writerow(cells + ["" if row.score is None else repr(row.score)])
        return buf.getvalue()


# Worker state for process pools: loaded once per worker, read-only afterwards.
_STATE: dict = {}


def _init_worker(experts, base, devset, enc):
    _STATE.update(experts=experts, base=base, devset=devset, enc=enc)


def evaluate_recipe(
    recipe: MergeRecipe,
    experts: Mapping[str, Checkpoint],
    base: Checkpoint | None,
    devset: Mapping[str, RetrievalSet],
    enc: EncoderConfig,
) -> LeaderboardRow:
    try:
        merged = merge(recipe, dict(experts), base)
        per = score_sets(merged.to_float64(), devset, enc)
        score = aggregate(per, {n: rs.domain for n, rs in devset.items()}).aggregates[PRIMARY_METRIC]["avg_all"]
        return LeaderboardRow(recipe, float(score), per)
    except Exception as exc:  # noqa: BLE001 - a failed recipe is recorded, never fatal
        return LeaderboardRow(recipe, None, {}, f"{type(exc).__name__}: {exc}")


def _evaluate_in_worker(recipe: MergeRecipe) -> LeaderboardRow:
    return evaluate_recipe(recipe, _STATE["experts"], _STATE["base"], _STATE["devset"], _STATE["enc"])


def run_sweep(
    experts: Mapping[str, Checkpoint],
    base: Checkpoint | None,
    plan: SweepPlan,
    devset: Mapping[str, RetrievalSet],
    enc: EncoderConfig,
    workers: int = 1,
    evaluator: Callable[[MergeRecipe], LeaderboardRow] | None = None,
) -> Leaderboard:
    """Evaluate every recipe from :func:`enumerate_recipes` and rank them.

    Results are independent of ``workers``: each recipe is scored in isolation
    and the leaderboard is sorted once at the end.
    """
    if not devset:
        raise SweepError("empty dev set")
    ids = sorted(experts)
    rows: list[LeaderboardRow] = []
    pool = None
    if evaluator is None:
        if workers > 1:
            pool = ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(dict(experts), base, dict(devset), enc))
            evaluator = None
        else:
            def evaluator(r):
                return evaluate_recipe(r, experts, base, devset, enc)

    def score_batch(recipes: list[MergeRecipe]) -> list[float | None]:
        if pool is not None:
            batch = list(pool.map(_evaluate_in_worker, recipes))
        else:
            batch = [evaluator(r) for r in recipes]
        rows.extend(batch)
        return [r.score for r in batch]

    try:
        if plan.strategy == "coordinate":
            for _ in enumerate_recipes(plan, ids, score_batch):
                pass
        else:
            chunk: list[MergeRecipe] = []
            for recipe in enumerate_recipes(plan, ids):
                chunk.append(recipe)
                if len(chunk) >= 64:
                    score_batch(chunk)
                    chunk = []
            if chunk:
                score_batch(chunk)
    finally:
        if pool is not None:
            pool.shutdown()
    return Leaderboard(rows, {"plan": json.dumps(plan.to_dict(), sort_keys=True)})
