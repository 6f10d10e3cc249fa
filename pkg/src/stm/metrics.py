"""Brute-force dense retrieval and trec-style cut metrics (NDCG@k, Recall@k)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

Qrels = dict[str, dict[str, int]]
RankedRun = dict[str, list[tuple[str, float]]]

SPLITS = ("medical", "general")


class MetricError(ValueError):
    pass


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise MetricError("zero-norm embedding")
    return x / norms


def _rank(scores: np.ndarray, doc_ids: Sequence[str], k: int) -> list[tuple[str, float]]:
    # descending score, ascending doc id on exact ties
    order = sorted(range(len(doc_ids)), key=lambda i: (-scores[i], doc_ids[i]))[:k]
    return [(doc_ids[i], float(scores[i])) for i in order]


def retrieve_topk(query_emb, corpus_embs: Sequence[tuple[str, np.ndarray]], k: int = 10) -> list[tuple[str, float]]:
    """Top-k documents by cosine similarity to ``query_emb``."""
    if k < 1:
        raise MetricError("k must be >= 1")
    if not corpus_embs:
        raise MetricError("empty corpus")
    doc_ids = [d for d, _ in corpus_embs]
    scores = _unit_rows(np.stack([v for _, v in corpus_embs])) @ _unit_rows(query_emb)[0]
    return _rank(scores, doc_ids, k)


def retrieve_all(
    query_ids: Sequence[str], query_embs: np.ndarray, doc_ids: Sequence[str], doc_embs: np.ndarray, k: int = 10
) -> RankedRun:
    """Batched :func:`retrieve_topk` for many queries against one corpus."""
    if k < 1:
        raise MetricError("k must be >= 1")
    if len(doc_ids) == 0:
        raise MetricError("empty corpus")
    scores = _unit_rows(query_embs) @ _unit_rows(doc_embs).T
    doc_ids = list(doc_ids)
    by_id = np.argsort(np.array(doc_ids), kind="stable")
    run = {}
    for qi, qid in enumerate(query_ids):
        row = scores[qi]
        # lexsort: last key is primary; ids pre-sorted so ties fall back to ascending id
        order = by_id[np.lexsort((np.arange(len(by_id)), -row[by_id]))][:k]
        run[qid] = [(doc_ids[i], float(row[i])) for i in order]
    return run


def _scored_queries(run: RankedRun, qrels: Qrels) -> list[str]:
    qids = sorted(q for q in run if q in qrels)
    if not qids:
        raise MetricError("run and qrels share no query")
    return qids


def _dcg(gains: Sequence[float]) -> float:
    return sum(g / math.log2(i + 2) for i, g in enumerate(gains))


def _gain(rel: int, gain: str) -> float:
    if gain == "linear":
        return float(rel)
    if gain == "exponential":
        return float(2**rel - 1)
    raise MetricError(f"unknown gain {gain!r}")


def ndcg_per_query(run: RankedRun, qrels: Qrels, k: int = 10, gain: str = "linear") -> dict[str, float]:
    out = {}
    for qid in _scored_queries(run, qrels):
        judged = qrels[qid]
        ideal = sorted((r for r in judged.values() if r > 0), reverse=True)[:k]
        idcg = _dcg([_gain(r, gain) for r in ideal])
        if idcg == 0:
            continue
        ranked = run[qid][:k]
        dcg = _dcg([_gain(max(judged.get(d, 0), 0), gain) for d, _ in ranked])
        out[qid] = dcg / idcg
    return out


def ndcg_at_k(run: RankedRun, qrels: Qrels, k: int = 10, gain: str = "linear") -> float:
    """Mean NDCG@k over queries with at least one positive judgment."""
    per = ndcg_per_query(run, qrels, k, gain)
    if not per:
        raise MetricError("no scored query has a positive judgment")
    return sum(per[q] for q in sorted(per)) / len(per)


def recall_per_query(run: RankedRun, qrels: Qrels, k: int = 10) -> dict[str, float]:
    out = {}
    for qid in _scored_queries(run, qrels):
        relevant = {d for d, r in qrels[qid].items() if r > 0}
        if not relevant:
            continue
        hits = sum(1 for d, _ in run[qid][:k] if d in relevant)
        out[qid] = hits / len(relevant)
    return out


def recall_at_k(run: RankedRun, qrels: Qrels, k: int = 10) -> float:
    per = recall_per_query(run, qrels, k)
    if not per:
        raise MetricError("no scored query has a positive judgment")
    return sum(per[q] for q in sorted(per)) / len(per)


@dataclass
class MetricReport:
    per_dataset: dict[str, dict[str, float]]
    split_labels: dict[str, str]
    aggregates: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_dataset": {k: dict(sorted(v.items())) for k, v in sorted(self.per_dataset.items())},
            "split_labels": dict(sorted(self.split_labels.items())),
            "aggregates": {k: dict(v) for k, v in sorted(self.aggregates.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self, digits: int = 3) -> str:
        metrics = sorted({m for v in self.per_dataset.values() for m in v})
        rows = [["dataset", "split", *metrics]]
        for name in sorted(self.per_dataset):
            rows.append([name, self.split_labels[name], *(f"{self.per_dataset[name].get(m, float('nan')):.{digits}f}" for m in metrics)])
        for agg in ("avg_medical", "avg_general", "avg_all"):
            rows.append([agg, "", *(f"{self.aggregates[m][agg]:.{digits}f}" for m in metrics)])
        return format_table(rows)


def format_table(rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for j, row in enumerate(rows):
        cells = [str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(row, widths))]
        lines.append("  ".join(cells).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def aggregate(per_dataset: Mapping[str, Mapping[str, float] | float], split_labels: Mapping[str, str]) -> MetricReport:
    """Unweighted per-split and overall means of every metric.

    ``per_dataset`` maps dataset -> {metric: score} (a bare float is taken as
    ``ndcg@10``); ``split_labels`` maps dataset -> "medical" | "general".
    """
    scores = {d: ({"ndcg@10": float(v)} if isinstance(v, (int, float)) else dict(v)) for d, v in per_dataset.items()}
    missing = sorted(set(scores) - set(split_labels))
    if missing:
        raise MetricError(f"datasets without split label: {missing}")
    for d in scores:
        if split_labels[d] not in SPLITS:
            raise MetricError(f"split label for {d!r} must be one of {SPLITS}")
    labels = {d: split_labels[d] for d in scores}
    metrics = sorted({m for v in scores.values() for m in v})
    aggregates = {}
    for m in metrics:
        agg = {}
        for split in SPLITS:
            members = [scores[d][m] for d in sorted(scores) if labels[d] == split]
            if not members:
                raise MetricError(f"empty split {split!r}")
            agg[f"avg_{split}"] = sum(members) / len(members)
        every = [scores[d][m] for d in sorted(scores)]
        agg["avg_all"] = sum(every) / len(every)
        aggregates[m] = agg
    return MetricReport(scores, labels, aggregates)


def read_qrels(path: str | Path) -> Qrels:
    qrels: Qrels = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise MetricError(f"{path}:{n}: expected 'qid 0 docid rel'")
        qid, _, did, rel = parts
        qrels.setdefault(qid, {})[did] = int(rel)
    return qrels


def write_qrels(qrels: Qrels, path: str | Path) -> None:
    lines = [f"{q} 0 {d} {r}" for q in sorted(qrels) for d, r in sorted(qrels[q].items())]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def write_run(run: RankedRun, path: str | Path) -> None:
    lines = [f"{q} {d} {i + 1} {s!r}" for q in sorted(run) for i, (d, s) in enumerate(run[q])]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_run(path: str | Path) -> RankedRun:
    rows: dict[str, list[tuple[int, str, float]]] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise MetricError(f"{path}:{n}: expected 'qid docid rank score'")
        qid, did, rank, score = parts
        rows.setdefault(qid, []).append((int(rank), did, float(score)))
    return {q: [(d, s) for _, d, s in sorted(v)] for q, v in rows.items()}
