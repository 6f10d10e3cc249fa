"""A tiny transformer text encoder with a hand-written backward pass.

Architecture: token embedding -> ``n_layers`` x [single-head self-attention
(causal or bidirectional) + GELU feed-forward, residual around both] ->
EOS or mean pooling. No normalization layers, no positional embedding.
Everything runs in float64; checkpoints hold float32.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .lora import LoraAdapter
from .tensor_store import Checkpoint

EOS_ID = 0
QMARK_ID = 1
N_SPECIAL = 2
GELU_C = math.sqrt(2.0 / math.pi)


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 512
    dim: int = 32
    n_layers: int = 1
    max_len: int = 64
    mask_mode: str = "bidirectional"
    pooling: str = "eos"
    ffn_dim: int = 64

    def __post_init__(self):
        for name in ("vocab_size", "dim", "max_len", "ffn_dim"):
            if getattr(self, name) <= 0:
                raise EncoderError(f"{name} must be positive")
        if self.n_layers < 0:
            raise EncoderError("n_layers must be >= 0 (0 is a debug configuration)")
        if self.max_len < 2:
            raise EncoderError("max_len must be >= 2 to leave room for EOS")
        if self.vocab_size <= N_SPECIAL:
            raise EncoderError(f"vocab_size must exceed {N_SPECIAL} reserved ids")
        if self.mask_mode not in ("causal", "bidirectional"):
            raise EncoderError(f"mask_mode must be causal or bidirectional, got {self.mask_mode!r}")
        if self.pooling not in ("eos", "mean"):
            raise EncoderError(f"pooling must be eos or mean, got {self.pooling!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class Tokenizer:
    """Whitespace tokenizer: ``w<id>`` maps to ``id``, ``?`` to the question marker,
    any other word to a stable hash bucket. Sequences end in EOS."""

    def __init__(self, vocab_size: int, max_len: int):
        self.vocab_size = vocab_size
        self.max_len = max_len

    def word_id(self, word: str) -> int:
        if word == "?":
            return QMARK_ID
        if word.startswith("w") and word[1:].isdigit():
            idx = int(word[1:])
            if N_SPECIAL <= idx < self.vocab_size:
                return idx
        return N_SPECIAL + zlib.crc32(word.encode("utf-8")) % (self.vocab_size - N_SPECIAL)

    def encode(self, text: str) -> tuple[int, ...]:
        ids = [self.word_id(w) for w in text.split()]
        # keep the tail: a long prepended prompt must not push the query out
        ids = ids[-(self.max_len - 1) :] if self.max_len > 1 else []
        return tuple(ids) + (EOS_ID,)


def init_base_params(cfg: EncoderConfig, seed: int = 0) -> Checkpoint:
    """Random frozen backbone standing in for the pretrained LLM."""
    rng = np.random.default_rng(seed)
    d, h = cfg.dim, cfg.ffn_dim
    p = {"embed.weight": rng.normal(0.0, 1.0, size=(cfg.vocab_size, d))}
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        for name in ("q", "k", "v", "o"):
            p[f"{pre}.attn.{name}.weight"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
        p[f"{pre}.ffn.up.weight"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(h, d))
        p[f"{pre}.ffn.up.bias"] = np.full(h, 1e-2)
        p[f"{pre}.ffn.down.weight"] = rng.normal(0.0, 1.0 / math.sqrt(h), size=(d, h))
        p[f"{pre}.ffn.down.bias"] = np.full(d, 1e-2)
    return Checkpoint(p, {"model_id": f"toy-encoder-seed{seed}", "seed": str(seed)})


def effective_weights(params: Checkpoint, adapter: LoraAdapter | None = None) -> dict[str, np.ndarray]:
    w = params.to_float64()
    if adapter is not None:
        for name, (a, b) in adapter.factors.items():
            if name not in w:
                raise EncoderError(f"adapter target {name!r} not in params")
            w[name] = w[name] + adapter.scale * (b @ a)
    return w


def _gelu(x):
    t = np.tanh(GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _check_tokens(tokens: np.ndarray, cfg: EncoderConfig) -> None:
    if tokens.shape[1] > cfg.max_len:
        raise EncoderError(f"sequence length {tokens.shape[1]} exceeds max_len {cfg.max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise EncoderError(f"token id out of vocabulary range [0, {cfg.vocab_size})")


def _forward(w: dict, tokens: np.ndarray, cfg: EncoderConfig, keep: bool):
    """Encode same-length sequences ``tokens [B, L]``; returns pooled [B, d] and a cache."""
    _check_tokens(tokens, cfg)
    B, L = tokens.shape
    d = cfg.dim
    h = w["embed.weight"][tokens]
    cache = {"tokens": tokens, "layers": []}
    if cfg.mask_mode == "causal":
        mask = np.triu(np.ones((L, L), dtype=bool), k=1)
    else:
        mask = None
    inv = 1.0 / math.sqrt(d)
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        wq, wk, wv, wo = (w[f"{pre}.attn.{n}.weight"] for n in "qkvo")
        q, k, v = h @ wq.T, h @ wk.T, h @ wv.T
        s = (q @ k.transpose(0, 2, 1)) * inv
        if mask is not None:
            s = np.where(mask, -np.inf, s)
        s = s - s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        a = p @ v
        h1 = h + a @ wo.T
        z = h1 @ w[f"{pre}.ffn.up.weight"].T + w[f"{pre}.ffn.up.bias"]
        g, t = _gelu(z)
        h2 = h1 + g @ w[f"{pre}.ffn.down.weight"].T + w[f"{pre}.ffn.down.bias"]
        if keep:
            cache["layers"].append((h, q, k, v, p, a, h1, z, g, t))
        h = h2
    pooled = h[:, -1, :] if cfg.pooling == "eos" else h.mean(axis=1)
    return pooled, cache


def _backward(w: dict, cache: dict, dpooled: np.ndarray, cfg: EncoderConfig, grads: dict) -> None:
    """Accumulate parameter gradients of ``sum(dpooled * pooled)`` into ``grads``."""
    tokens = cache["tokens"]
    B, L = tokens.shape
    d = cfg.dim
    dh = np.zeros((B, L, d))
    if cfg.pooling == "eos":
        dh[:, -1, :] = dpooled
    else:
        dh[:] = dpooled[:, None, :] / L
    inv = 1.0 / math.sqrt(d)
    for i in reversed(range(cfg.n_layers)):
        pre = f"layers.{i}"
        h, q, k, v, p, a, h1, z, g, t = cache["layers"][i]
        wd = w[f"{pre}.ffn.down.weight"]
        wu = w[f"{pre}.ffn.up.weight"]
        wq, wk, wv, wo = (w[f"{pre}.attn.{n}.weight"] for n in "qkvo")
        # feed-forward
        df = dh.reshape(-1, d)
        grads[f"{pre}.ffn.down.weight"] += df.T @ g.reshape(-1, g.shape[-1])
        grads[f"{pre}.ffn.down.bias"] += df.sum(axis=0)
        dz = (dh @ wd) * _gelu_grad(z, t)
        dz2 = dz.reshape(-1, dz.shape[-1])
        grads[f"{pre}.ffn.up.weight"] += dz2.T @ h1.reshape(-1, d)
        grads[f"{pre}.ffn.up.bias"] += dz2.sum(axis=0)
        dh1 = dh + dz @ wu
        # attention
        grads[f"{pre}.attn.o.weight"] += dh1.reshape(-1, d).T @ a.reshape(-1, d)
        da = dh1 @ wo
        dp = da @ v.transpose(0, 2, 1)
        dv = p.transpose(0, 2, 1) @ da
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * inv
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        hf = h.reshape(-1, d)
        grads[f"{pre}.attn.q.weight"] += dq.reshape(-1, d).T @ hf
        grads[f"{pre}.attn.k.weight"] += dk.reshape(-1, d).T @ hf
        grads[f"{pre}.attn.v.weight"] += dv.reshape(-1, d).T @ hf
        dh = dh1 + dq @ wq + dk @ wk + dv @ wv
    np.add.at(grads["embed.weight"], tokens.reshape(-1), dh.reshape(-1, d))


def _buckets(seqs: Sequence[Sequence[int]]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        if len(s) == 0:
            raise EncoderError("empty token sequence")
        groups.setdefault(len(s), []).append(i)
    return groups


def encode_weights(w: dict, seqs: Sequence[Sequence[int]], cfg: EncoderConfig) -> np.ndarray:
    """Embed many sequences with precomputed effective weights; returns [n, d]."""
    out = np.empty((len(seqs), cfg.dim))
    for _, idx in sorted(_buckets(seqs).items()):
        tokens = np.array([seqs[i] for i in idx], dtype=np.int64)
        out[idx], _ = _forward(w, tokens, cfg, keep=False)
    return out


def encode_many(
    params: Checkpoint, seqs: Sequence[Sequence[int]], cfg: EncoderConfig, adapter: LoraAdapter | None = None
) -> np.ndarray:
    return encode_weights(effective_weights(params, adapter), seqs, cfg)


def encode(params: Checkpoint, tokens: Sequence[int], cfg: EncoderConfig, adapter: LoraAdapter | None = None) -> np.ndarray:
    """Embedding (length ``cfg.dim``) of one token sequence; not normalized."""
    return encode_many(params, [tokens], cfg, adapter)[0]


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise EncoderError("cosine similarity of a zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def info_nce_terms(pos: np.ndarray, hard: np.ndarray, temperature: float = 1.0):
    """Per-query InfoNCE losses and their gradients.

    ``pos[i, j]`` is sim(q_i, p_j+) and ``hard[i]`` is sim(q_i, p_i-). The
    denominator holds the query's own hard negative plus every in-batch
    positive, its own included. Returns ``(losses [N], dpos [N, N], dhard [N])``
    where the gradients are of the mean loss.
    """
    pos = np.asarray(pos, dtype=np.float64)
    hard = np.asarray(hard, dtype=np.float64)
    n = pos.shape[0]
    logits = np.concatenate([hard[:, None], pos], axis=1) / temperature
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    losses = -(np.diag(pos) / temperature) + (np.log(z) + m)[:, 0]
    soft = e / z
    dlogits = soft / n
    dpos = dlogits[:, 1:].copy()
    dpos[np.arange(n), np.arange(n)] -= 1.0 / n
    return losses, dpos / temperature, dlogits[:, 0] / temperature


def info_nce_loss(pos, hard, temperature: float = 1.0) -> float:
    """Mean InfoNCE loss over the batch (see :func:`info_nce_terms`)."""
    if temperature <= 0:
        raise EncoderError("temperature must be positive")
    return float(info_nce_terms(pos, hard, temperature)[0].mean())


def _normalize(x: np.ndarray):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise EncoderError("zero-norm embedding")
    return x / norms, norms


def _unnormalize_grad(xhat, norms, dxhat):
    return (dxhat - xhat * (xhat * dxhat).sum(axis=1, keepdims=True)) / norms


@dataclass(frozen=True)
class TripletBatch:
    queries: tuple[tuple[int, ...], ...]
    positives: tuple[tuple[int, ...], ...]
    negatives: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        n = len(self.queries)
        if n < 1 or len(self.positives) != n or len(self.negatives) != n:
            raise EncoderError("a triplet batch needs N >= 1 aligned (query, positive, negative) items")
        for seq in (*self.queries, *self.positives, *self.negatives):
            if not seq or seq[-1] != EOS_ID:
                raise EncoderError("every sequence must end with EOS")

    def __len__(self) -> int:
        return len(self.queries)


def batch_loss_and_grads(
    w: dict, batch: TripletBatch, cfg: EncoderConfig, temperature: float = 1.0, need_grads: bool = True
):
    """Mean InfoNCE loss of ``batch`` and (optionally) gradients w.r.t. every weight in ``w``."""
    n = len(batch)
    seqs = list(batch.queries) + list(batch.positives) + list(batch.negatives)
    emb = np.empty((3 * n, cfg.dim))
    caches = []
    for _, idx in sorted(_buckets(seqs).items()):
        tokens = np.array([seqs[i] for i in idx], dtype=np.int64)
        emb[idx], cache = _forward(w, tokens, cfg, keep=need_grads)
        caches.append((idx, cache))
    xhat, norms = _normalize(emb)
    qh, ph, nh = xhat[:n], xhat[n : 2 * n], xhat[2 * n :]
    pos = qh @ ph.T
    hard = (qh * nh).sum(axis=1)
    losses, dpos, dhard = info_nce_terms(pos, hard, temperature)
    loss = float(losses.mean())
    if not need_grads:
        return loss, None
    dxhat = np.empty_like(xhat)
    dxhat[:n] = dpos @ ph + dhard[:, None] * nh
    dxhat[n : 2 * n] = dpos.T @ qh
    dxhat[2 * n :] = dhard[:, None] * qh
    demb = _unnormalize_grad(xhat, norms, dxhat)
    grads = {k: np.zeros_like(v) for k, v in w.items()}
    for idx, cache in caches:
        _backward(w, cache, demb[idx], cfg, grads)
    return loss, grads


def adapter_grads(adapter: LoraAdapter, dense: dict) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Chain rule from dense weight gradients to the (A, B) factors."""
    out = {}
    s = adapter.scale
    for name, (a, b) in adapter.factors.items():
        dw = dense[name]
        out[name] = (s * (b.T @ dw), s * (dw @ a.T))
    return out
