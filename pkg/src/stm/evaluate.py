"""Embed held-out retrieval sets with a checkpoint and score them."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .encoder import EncoderConfig, Tokenizer, effective_weights, encode_weights
from .lora import LoraAdapter
from .metrics import MetricReport, aggregate, ndcg_at_k, recall_at_k, retrieve_all
from .synth import RetrievalSet
from .tensor_store import Checkpoint


def score_sets(
    weights: dict[str, np.ndarray], sets: Mapping[str, RetrievalSet], enc: EncoderConfig, k: int = 10
) -> dict[str, dict[str, float]]:
    """NDCG@k and Recall@k per named set; identical corpora are embedded once."""
    tok = Tokenizer(enc.vocab_size, enc.max_len)
    embedded: list[tuple[dict, list[str], np.ndarray]] = []
    out = {}
    for name in sorted(sets):
        rs = sets[name]
        hit = next((e for e in embedded if e[0] is rs.corpus or e[0] == rs.corpus), None)
        if hit is None:
            doc_ids = sorted(rs.corpus)
            hit = (rs.corpus, doc_ids, encode_weights(weights, [tok.encode(rs.corpus[d]) for d in doc_ids], enc))
            embedded.append(hit)
        _, doc_ids, doc_embs = hit
        qids = sorted(rs.queries)
        q_embs = encode_weights(weights, [tok.encode(rs.query_text(q)) for q in qids], enc)
        run = retrieve_all(qids, q_embs, doc_ids, doc_embs, k=k)
        out[name] = {f"ndcg@{k}": ndcg_at_k(run, rs.qrels, k), f"recall@{k}": recall_at_k(run, rs.qrels, k)}
    return out


def evaluate_model(
    params: Checkpoint,
    sets: Mapping[str, RetrievalSet],
    enc: EncoderConfig,
    adapter: LoraAdapter | None = None,
    k: int = 10,
) -> MetricReport:
    """Per-set metrics plus medical / general / overall averages."""
    scores = score_sets(effective_weights(params, adapter), sets, enc, k)
    return aggregate(scores, {name: rs.domain for name, rs in sets.items()})
