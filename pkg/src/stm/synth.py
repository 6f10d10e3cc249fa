"""Synthetic training data: hard-negative prompts, an LLM client, prompt pools,
and a deterministic toy four-split retrieval corpus."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .metrics import Qrels

log = logging.getLogger(__name__)

SPLITS = ("med_synth", "med_real", "search", "nlu")
SPLIT_DOMAIN = {"med_synth": "medical", "med_real": "medical", "search": "general", "nlu": "general"}
URL_ENV = "STM_LLM_URL"
TOKEN_ENV = "STM_LLM_TOKEN"


class DataError(ValueError):
    pass


class LLMError(RuntimeError):
    pass


class LLMAuthError(LLMError):
    pass


class TransientLLMError(LLMError):
    pass


class EmptyGenerationError(LLMError):
    pass


# --- prompt assets -----------------------------------------------------------


def _asset(name: str) -> str:
    return resources.files("stm").joinpath("assets", name).read_text(encoding="utf-8")


def hard_negative_template() -> str:
    return _asset("hard_negative_prompt.txt")


def generic_prompt_generation_template() -> str:
    return _asset("generic_prompt_generation.txt")


def prompt_assets() -> dict:
    return json.loads(_asset("prompts.json"))


_SLOT = re.compile(r"\{(query|original prompt|positive doc|original negative)\}")


def render_hard_negative_prompt(query: str, original_prompt: str, positive: str, original_negative: str) -> str:
    """Fill the four slots of the hard-negative generation template (single pass)."""
    values = {
        "query": query,
        "original prompt": original_prompt,
        "positive doc": positive,
        "original negative": original_negative,
    }
    for name, value in values.items():
        if not value:
            raise DataError(f"hard-negative prompt field {name!r} is empty")
    return _SLOT.sub(lambda m: values[m.group(1)], hard_negative_template())


# --- LLM client ----------------------------------------------------------------


class TextClient(Protocol):
    def generate(self, prompt: str) -> str: ...


@dataclass
class HttpTextClient:
    """POSTs ``{"prompt": ..., **params}`` as JSON with a bearer token.

    Accepts a ``{"text": ...}`` response or an OpenAI-style ``choices`` list.
    Temperature and length limits are passed through only when set.
    """

    url: str
    token: str | None = None
    timeout: float = 60.0
    temperature: float | None = None
    max_tokens: int | None = None

    @classmethod
    def from_env(cls, **kwargs) -> HttpTextClient:
        url = os.environ.get(URL_ENV)
        if not url:
            raise LLMError(f"{URL_ENV} is not set")
        return cls(url=url, token=os.environ.get(TOKEN_ENV), **kwargs)

    def generate(self, prompt: str) -> str:
        body = {"prompt": prompt}
        if self.temperature is not None:
            body["temperature"] = self.temperature
        if self.max_tokens is not None:
            body["max_tokens"] = self.max_tokens
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.url, data=json.dumps(body).encode(), headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            if exc.code in (401, 403):
                raise LLMAuthError(f"authentication failed ({exc.code})") from exc
            if exc.code == 429 or exc.code >= 500:
                raise TransientLLMError(f"HTTP {exc.code}") from exc
            raise LLMError(f"HTTP {exc.code}") from exc
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise TransientLLMError(str(exc)) from exc
        return _response_text(payload)


def _response_text(payload) -> str:
    if isinstance(payload, dict):
        if isinstance(payload.get("text"), str):
            return payload["text"]
        choices = payload.get("choices")
        if choices:
            first = choices[0]
            if isinstance(first.get("message"), dict):
                return first["message"].get("content") or ""
            return first.get("text") or ""
    raise LLMError("unrecognized response payload")


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class AuditLog:
    """Append-only JSONL of ``{timestamp, prompt_hash, response}``; writes are serialized."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, prompt: str, response: str) -> None:
        record = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "prompt_hash": prompt_hash(prompt),
            "response": response,
        }
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


class ReplayClient:
    """Answers from a recorded audit log; the last non-empty response per prompt wins."""

    def __init__(self, path: str | Path):
        self.responses: dict[str, str] = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                if rec["response"]:
                    self.responses[rec["prompt_hash"]] = rec["response"]

    def generate(self, prompt: str) -> str:
        try:
            return self.responses[prompt_hash(prompt)]
        except KeyError:
            raise LLMError("prompt not present in replay log") from None


def request_negative(
    client: TextClient,
    rendered_prompt: str,
    audit: AuditLog | None = None,
    max_retries: int = 3,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Generate one document, retrying transient failures with exponential backoff.

    Auth failures are not retried. An empty generation is rejected and retried
    once; a second empty answer raises :class:`EmptyGenerationError`.
    """
    attempts = 0
    transient = 0
    empties = 0
    while True:
        attempts += 1
        try:
            text = client.generate(rendered_prompt)
        except LLMAuthError:
            raise
        except TransientLLMError as exc:
            transient += 1
            if transient > max_retries:
                raise LLMError(f"giving up after {attempts} attempts: {exc}") from exc
            sleep(backoff * 2 ** (transient - 1))
            continue
        if audit is not None:
            audit.append(rendered_prompt, text)
        if text.strip():
            return text
        empties += 1
        if empties >= 2:
            raise EmptyGenerationError(f"empty generation after {attempts} attempts")


def request_negatives(
    client: TextClient, prompts: Sequence[str], audit: AuditLog | None = None, max_workers: int = 4, **kwargs
) -> list[str]:
    """Concurrent :func:`request_negative` with at most ``max_workers`` requests in flight."""
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda p: request_negative(client, p, audit, **kwargs), prompts))


# --- prompt pools ----------------------------------------------------------------


@dataclass(frozen=True)
class PromptPool:
    prompts: tuple[str, ...]

    def __post_init__(self):
        if not self.prompts:
            raise DataError("prompt pool is empty")
        if len(set(self.prompts)) != len(self.prompts):
            raise DataError("prompt pool contains duplicates")

    def __len__(self) -> int:
        return len(self.prompts)

    @classmethod
    def from_assets(cls, name: str) -> PromptPool:
        """Shipped prompts: ``baseline``, ``generic`` or ``gepa-{light,medium,heavy}``."""
        assets = prompt_assets()
        if name == "baseline":
            return cls(tuple(assets["baseline"].values()))
        if name == "generic":
            return cls(tuple(assets["generic"].values()))
        if name.startswith("gepa-") and name[5:] in assets["gepa"]:
            return cls(tuple(assets["gepa"][name[5:]].values()))
        raise DataError(f"unknown prompt asset pool {name!r}")


def generate_prompt_pool(client: TextClient, size: int, audit: AuditLog | None = None, max_attempts: int | None = None) -> PromptPool:
    """Ask ``client`` for generic retrieval prompts until ``size`` distinct ones exist."""
    template = generic_prompt_generation_template()
    seen: dict[str, None] = {}
    limit = max_attempts or 3 * size
    for _ in range(limit):
        if len(seen) >= size:
            break
        seen.setdefault(request_negative(client, template, audit).strip(), None)
    if len(seen) < size:
        raise LLMError(f"only {len(seen)} distinct prompts after {limit} requests")
    return PromptPool(tuple(seen))


def assign_prompts(query_ids: Iterable[str], pool: PromptPool, seed: int) -> dict[str, str]:
    """Uniform seeded prompt per query (query ids are visited in sorted order)."""
    qids = sorted(query_ids)
    picks = np.random.default_rng(seed).integers(0, len(pool), size=len(qids))
    return {q: pool.prompts[i] for q, i in zip(qids, picks)}


def with_prompt(query: str, prompt: str | None) -> str:
    return f"{prompt}\n{query}" if prompt else query


# --- retrieval sets ----------------------------------------------------------------


@dataclass
class RetrievalSet:
    corpus: dict[str, str]
    queries: dict[str, str]
    triplets: list[tuple[str, str, str]]
    qrels: Qrels
    split: str
    prompts: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r}")
        for q, p, n in self.triplets:
            if q not in self.queries or p not in self.corpus or n not in self.corpus:
                raise DataError(f"triplet ({q}, {p}, {n}) references unknown ids")
            if self.qrels.get(q, {}).get(p, 0) <= 0:
                raise DataError(f"triplet positive {p} lacks positive relevance for {q}")
            if self.qrels.get(q, {}).get(n, 0) != 0:
                raise DataError(f"hard negative {n} carries positive relevance for {q}")
        for q, docs in self.qrels.items():
            if q not in self.queries or any(d not in self.corpus for d in docs):
                raise DataError(f"qrels for {q} reference unknown ids")
        for q in self.prompts:
            if q not in self.queries:
                raise DataError(f"prompt assigned to unknown query {q}")

    @property
    def domain(self) -> str:
        return SPLIT_DOMAIN[self.split]

    def query_text(self, qid: str) -> str:
        return with_prompt(self.queries[qid], self.prompts.get(qid))

    def to_records(self) -> list[dict]:
        recs = [{"kind": "doc", "id": d, "text": t} for d, t in sorted(self.corpus.items())]
        recs += [{"kind": "query", "id": q, "text": t, "split": self.split} for q, t in sorted(self.queries.items())]
        recs += [{"kind": "triplet", "query": q, "positive": p, "negative": n} for q, p, n in self.triplets]
        recs += [
            {"kind": "qrel", "query": q, "doc": d, "relevance": r}
            for q in sorted(self.qrels)
            for d, r in sorted(self.qrels[q].items())
        ]
        recs += [{"kind": "prompt_assignment", "query": q, "prompt": p} for q, p in sorted(self.prompts.items())]
        return recs

    def dumps(self) -> str:
        return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in self.to_records())

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> RetrievalSet:
        corpus, queries, triplets, qrels, prompts, splits = {}, {}, [], {}, {}, set()
        for rec in records:
            kind = rec.get("kind")
            if kind == "doc":
                corpus[rec["id"]] = rec["text"]
            elif kind == "query":
                queries[rec["id"]] = rec["text"]
                splits.add(rec["split"])
            elif kind == "triplet":
                triplets.append((rec["query"], rec["positive"], rec["negative"]))
            elif kind == "qrel":
                qrels.setdefault(rec["query"], {})[rec["doc"]] = int(rec["relevance"])
            elif kind == "prompt_assignment":
                prompts[rec["query"]] = rec["prompt"]
            else:
                raise DataError(f"unknown record kind {kind!r}")
        if len(splits) != 1:
            raise DataError(f"a dataset file must hold exactly one split, found {sorted(splits)}")
        return cls(corpus, queries, triplets, qrels, splits.pop(), prompts)

    @classmethod
    def loads(cls, text: str) -> RetrievalSet:
        return cls.from_records(json.loads(line) for line in text.splitlines() if line.strip())


def save_set(rs: RetrievalSet, path: str | Path) -> None:
    Path(path).write_text(rs.dumps(), encoding="utf-8")


def load_set(path: str | Path) -> RetrievalSet:
    return RetrievalSet.loads(Path(path).read_text(encoding="utf-8"))


# --- toy corpus generator ----------------------------------------------------------------


@dataclass(frozen=True)
class ToyTopic:
    split: str
    index: int
    keywords: tuple[int, ...]
    answers: tuple[int, ...]


@dataclass
class ToyWorld:
    """Token inventory of the toy generator: disjoint keyword/answer ids per topic."""

    topics: list[ToyTopic]
    query_keywords: int = 3
    doc_keywords: int = 3

    def split_topics(self, split: str) -> list[ToyTopic]:
        return [t for t in self.topics if t.split == split]

    def topic_of_answer(self, token: int) -> ToyTopic | None:
        for t in self.topics:
            if token in t.answers:
                return t
        return None

    def query(self, topic: ToyTopic, rng) -> str:
        kws = rng.choice(topic.keywords, size=self.query_keywords, replace=False)
        return " ".join(f"w{k}" for k in kws) + " ?"

    def doc(self, topic: ToyTopic, answer: int, rng, anchor: int | None = None) -> str:
        """Topic keywords plus one answer token; ``anchor`` forces one shared keyword."""
        if anchor is None:
            kws = list(rng.choice(topic.keywords, size=self.doc_keywords, replace=False))
        else:
            rest = [k for k in topic.keywords if k != anchor]
            kws = [anchor] + list(rng.choice(rest, size=self.doc_keywords - 1, replace=False))
        kws.append(answer)
        rng.shuffle(kws)
        return " ".join(f"w{k}" for k in kws)

    def wrong_topic(self, topic: ToyTopic, rng) -> ToyTopic:
        others = [t for t in self.split_topics(topic.split) if t is not topic] or [t for t in self.topics if t is not topic]
        return others[int(rng.integers(len(others)))]


KEYWORDS_PER_TOPIC = 6
ANSWERS_PER_TOPIC = 2
TOKENS_PER_TOPIC = KEYWORDS_PER_TOPIC + ANSWERS_PER_TOPIC


def build_world(topics_per_split: int, vocab_size: int, seed: int) -> ToyWorld:
    n_topics = topics_per_split * len(SPLITS)
    if topics_per_split < 1:
        raise DataError("topics_per_split must be >= 1")
    if vocab_size - 2 < TOKENS_PER_TOPIC * n_topics:
        raise DataError(f"vocab {vocab_size} too small for {n_topics} topics ({TOKENS_PER_TOPIC} ids each + 2 reserved)")
    rng = np.random.default_rng([seed, 0])
    ids = rng.permutation(np.arange(2, vocab_size))[: TOKENS_PER_TOPIC * n_topics]
    topics = []
    for i in range(n_topics):
        chunk = [int(x) for x in ids[i * TOKENS_PER_TOPIC : (i + 1) * TOKENS_PER_TOPIC]]
        topics.append(
            ToyTopic(SPLITS[i // topics_per_split], i, tuple(chunk[:KEYWORDS_PER_TOPIC]), tuple(chunk[KEYWORDS_PER_TOPIC:]))
        )
    return ToyWorld(topics)


def _train_set(world: ToyWorld, split: str, pairs: int, rng) -> RetrievalSet:
    topics = world.split_topics(split)
    corpus, queries, triplets, qrels = {}, {}, [], {}
    for n in range(pairs):
        topic = topics[int(rng.integers(len(topics)))]
        qid, pid, nid = f"{split}-q{n:05d}", f"{split}-d{2 * n:05d}", f"{split}-d{2 * n + 1:05d}"
        queries[qid] = world.query(topic, rng)
        corpus[pid] = world.doc(topic, int(rng.choice(topic.answers)), rng)
        anchor = int(rng.choice([int(w[1:]) for w in corpus[pid].split() if int(w[1:]) in topic.keywords]))
        wrong = world.wrong_topic(topic, rng)
        corpus[nid] = world.doc(topic, int(rng.choice(wrong.answers)), rng, anchor=anchor)
        triplets.append((qid, pid, nid))
        qrels[qid] = {pid: 1, nid: 0}
    return RetrievalSet(corpus, queries, triplets, qrels, split)


def _heldout_sets(world: ToyWorld, name: str, queries_per_topic: int, docs_per_topic: int, rng) -> dict[str, RetrievalSet]:
    corpus: dict[str, str] = {}
    relevant: dict[int, list[str]] = {}
    n = 0
    for topic in world.topics:
        relevant[topic.index] = []
        for j in range(docs_per_topic):
            did = f"{name}-d{n:05d}"
            n += 1
            corpus[did] = world.doc(topic, int(rng.choice(topic.answers)), rng)
            relevant[topic.index].append(did)
            did = f"{name}-d{n:05d}"
            n += 1
            corpus[did] = world.doc(topic, int(rng.choice(world.wrong_topic(topic, rng).answers)), rng)
    sets = {}
    for split in SPLITS:
        queries, qrels = {}, {}
        for topic in world.split_topics(split):
            for j in range(queries_per_topic):
                qid = f"{name}-{split}-q{topic.index:02d}{j:03d}"
                queries[qid] = world.query(topic, rng)
                qrels[qid] = {d: 1 for d in relevant[topic.index]}
        sets[split] = RetrievalSet(dict(corpus), queries, [], qrels, split)
    return sets


@dataclass
class ToyData:
    world: ToyWorld
    train: dict[str, RetrievalSet]
    dev: dict[str, RetrievalSet]
    test: dict[str, RetrievalSet]


def generate_toy_sets(
    topics_per_split: int = 4,
    pairs_per_split: int = 500,
    vocab_size: int = 512,
    seed: int = 0,
    queries_per_topic: int = 10,
    docs_per_topic: int = 5,
) -> ToyData:
    """Four disjoint-topic training splits plus held-out dev and test sets.

    Each topic owns keyword and answer tokens. A query samples topic keywords;
    its positive pairs topic keywords with one of the topic's answers, and its
    hard negative pairs the same kind of keywords with another topic's answer.
    Held-out sets hold, per split, fresh queries over one shared corpus in which
    every topic has ``docs_per_topic`` relevant and as many decoy documents.
    """
    world = build_world(topics_per_split, vocab_size, seed)
    train = {s: _train_set(world, s, pairs_per_split, np.random.default_rng([seed, 1, i])) for i, s in enumerate(SPLITS)}
    dev = _heldout_sets(world, "dev", queries_per_topic, docs_per_topic, np.random.default_rng([seed, 2]))
    test = _heldout_sets(world, "test", queries_per_topic, docs_per_topic, np.random.default_rng([seed, 3]))
    return ToyData(world, train, dev, test)


class ToyNegativeClient:
    """Offline stand-in for the LLM: reads the positive document out of a rendered
    hard-negative prompt and swaps its answer token for another topic's."""

    _POSITIVE = re.compile(r'^Original positive document: "(.*)"$', re.M)

    def __init__(self, world: ToyWorld, seed: int = 0):
        self.world = world
        self.seed = seed

    def generate(self, prompt: str) -> str:
        m = self._POSITIVE.search(prompt)
        if not m:
            return ""
        rng = np.random.default_rng([self.seed, int(prompt_hash(prompt)[:8], 16)])
        words = m.group(1).split()
        out = []
        for w in words:
            topic = self.world.topic_of_answer(int(w[1:])) if w[1:].isdigit() else None
            if topic is not None:
                wrong = self.world.wrong_topic(topic, rng)
                w = f"w{int(rng.choice(wrong.answers))}"
            out.append(w)
        return " ".join(out)


def regenerate_negatives(
    rs: RetrievalSet, client: TextClient, audit: AuditLog | None = None, max_workers: int = 4
) -> RetrievalSet:
    """Replace every triplet's hard negative by a generated one (new doc ids ``<neg>-gen``)."""
    rendered = [
        render_hard_negative_prompt(rs.queries[q], rs.prompts.get(q) or "none", rs.corpus[p], rs.corpus[n])
        for q, p, n in rs.triplets
    ]
    texts = request_negatives(client, rendered, audit, max_workers=max_workers)
    corpus = dict(rs.corpus)
    qrels = {q: dict(v) for q, v in rs.qrels.items()}
    triplets = []
    for (q, p, n), text in zip(rs.triplets, texts):
        gid = f"{n}-gen"
        corpus[gid] = text.strip()
        qrels[q][gid] = 0
        triplets.append((q, p, gid))
    return RetrievalSet(corpus, dict(rs.queries), triplets, qrels, rs.split, dict(rs.prompts))
