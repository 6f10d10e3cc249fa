import json
from collections import Counter

import pytest

from oracles import FIXTURES, latex_prompt_assets, latex_promptbox
from stm.synth import (
    SPLITS,
    AuditLog,
    DataError,
    EmptyGenerationError,
    LLMAuthError,
    LLMError,
    PromptPool,
    ReplayClient,
    RetrievalSet,
    ToyNegativeClient,
    TransientLLMError,
    assign_prompts,
    build_world,
    generate_prompt_pool,
    generate_toy_sets,
    generic_prompt_generation_template,
    hard_negative_template,
    load_set,
    prompt_assets,
    regenerate_negatives,
    render_hard_negative_prompt,
    request_negative,
    request_negatives,
    save_set,
    with_prompt,
)

GOLDEN_ARGS = (
    "What lowers LDL cholesterol?",
    "Given a query, find articles that discuss the correlation between a specific lifestyle factor and a disease.",
    "Statins reduce LDL by 30-50% in most adults.",
    'HDL is often called "good" cholesterol.',
)


# --- prompt rendering ---


def test_render_matches_golden_file():
    golden = (FIXTURES / "hard_negative_golden.txt").read_bytes()
    assert render_hard_negative_prompt(*GOLDEN_ARGS).encode("utf-8") == golden


def test_render_contains_domain_line():
    out = render_hard_negative_prompt("Q", "A", "B", "C")
    assert "1. Related to the same domain (extract domain from the query)" in out.splitlines()
    assert out.startswith('Given this query: "Q"\n')
    assert 'Original negative document: "C"' in out


def test_render_single_pass():
    # slot syntax inside a value must not be expanded again
    out = render_hard_negative_prompt("{positive doc}", "A", "B", "C")
    assert 'Given this query: "{positive doc}"' in out


@pytest.mark.parametrize("empty", range(4))
def test_render_empty_field(empty):
    args = ["Q", "A", "B", "C"]
    args[empty] = ""
    with pytest.raises(DataError):
        render_hard_negative_prompt(*args)


def test_hard_negative_asset_matches_source():
    assert hard_negative_template() == latex_promptbox("Hard Negative Generation Prompt")


def test_generic_generation_asset_matches_source():
    assert generic_prompt_generation_template() == latex_promptbox("Generic Prompts Generation Prompt")


def test_prompt_assets_match_source():
    assert prompt_assets() == latex_prompt_assets()


def test_prompt_pool_assets():
    assert len(PromptPool.from_assets("generic")) == 4
    assert len(PromptPool.from_assets("gepa-heavy")) == 2
    with pytest.raises(DataError):
        PromptPool.from_assets("gepa-extreme")


# --- LLM client ---


class Scripted:
    """Returns or raises the scripted items in order."""

    def __init__(self, *items):
        self.items = list(items)
        self.calls = 0

    def generate(self, prompt):
        self.calls += 1
        item = self.items.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


class Echo:
    def generate(self, prompt):
        return "DOC"


def test_stub_echo():
    assert request_negative(Echo(), "p") == "DOC"


def test_empty_twice_reports_attempts():
    client = Scripted("", "  ")
    with pytest.raises(EmptyGenerationError, match="2 attempts"):
        request_negative(client, "p")
    assert client.calls == 2


def test_empty_once_is_retried():
    assert request_negative(Scripted("", "DOC"), "p") == "DOC"


def test_transient_failures_back_off():
    waits = []
    client = Scripted(TransientLLMError("503"), TransientLLMError("timeout"), "DOC")
    assert request_negative(client, "p", backoff=0.5, sleep=waits.append) == "DOC"
    assert waits == [0.5, 1.0]


def test_transient_gives_up_after_max_retries():
    waits = []
    client = Scripted(*[TransientLLMError("503")] * 4)
    with pytest.raises(LLMError, match="4 attempts"):
        request_negative(client, "p", sleep=waits.append)
    assert len(waits) == 3


def test_auth_failure_not_retried():
    client = Scripted(LLMAuthError("401"), "DOC")
    with pytest.raises(LLMAuthError):
        request_negative(client, "p", sleep=lambda s: None)
    assert client.calls == 1


def test_audit_log_and_replay(tmp_path):
    log = AuditLog(tmp_path / "audit.jsonl")
    prompts = [render_hard_negative_prompt(f"Q{i}", "A", "B", "C") for i in range(5)]
    outputs = request_negatives(Scripted(*[f"doc {i}" for i in range(5)]), prompts[:1], log)
    outputs += [request_negative(Scripted(f"doc {i}"), p, log) for i, p in enumerate(prompts[1:], start=1)]
    records = [json.loads(line) for line in (tmp_path / "audit.jsonl").read_text().splitlines()]
    assert len(records) == 5 and set(records[0]) == {"timestamp", "prompt_hash", "response"}
    replay1 = [request_negative(ReplayClient(tmp_path / "audit.jsonl"), p) for p in prompts]
    replay2 = request_negatives(ReplayClient(tmp_path / "audit.jsonl"), prompts, max_workers=3)
    assert replay1 == replay2 == outputs
    with pytest.raises(LLMError):
        ReplayClient(tmp_path / "audit.jsonl").generate("unseen")


def test_generate_prompt_pool_dedupes():
    pool = generate_prompt_pool(Scripted("a", "b", "a", "c"), 3)
    assert pool.prompts == ("a", "b", "c")
    with pytest.raises(LLMError):
        generate_prompt_pool(Scripted("a", "a", "a"), 2, max_attempts=3)


# --- prompt assignment ---


def test_pool_invariants():
    with pytest.raises(DataError):
        PromptPool(())
    with pytest.raises(DataError):
        PromptPool(("a", "a"))


def test_assign_pool_of_one():
    assert set(assign_prompts(["q1", "q2", "q3"], PromptPool(("only",)), 0).values()) == {"only"}


def test_assign_deterministic():
    pool = PromptPool(tuple(f"p{i}" for i in range(7)))
    qids = [f"q{i}" for i in range(50)]
    assert assign_prompts(qids, pool, 3) == assign_prompts(reversed(qids), pool, 3)


def test_assign_frequencies():
    pool = PromptPool(tuple(f"p{i}" for i in range(10)))
    counts = Counter(assign_prompts([f"q{i:04d}" for i in range(1000)], pool, 42).values())
    assert set(counts) == set(pool.prompts)
    assert all(50 <= c <= 150 for c in counts.values())


def test_with_prompt_format():
    assert with_prompt("query", "Find it.") == "Find it.\nquery"
    assert with_prompt("query", None) == "query"


def test_prompt_assignment_survives_file_roundtrip(tmp_path):
    rs = generate_toy_sets(pairs_per_split=20, seed=1).train["nlu"]
    rs.prompts = assign_prompts(rs.queries, PromptPool.from_assets("generic"), 9)
    save_set(rs, tmp_path / "nlu.jsonl")
    back = load_set(tmp_path / "nlu.jsonl")
    assert back.prompts == rs.prompts
    assert all(back.query_text(q) == rs.query_text(q) for q in rs.queries)


# --- toy generator ---


def test_toy_deterministic():
    a, b = generate_toy_sets(seed=5, pairs_per_split=50), generate_toy_sets(seed=5, pairs_per_split=50)
    for part in ("train", "dev", "test"):
        for s in SPLITS:
            assert getattr(a, part)[s].dumps() == getattr(b, part)[s].dumps()
    assert generate_toy_sets(seed=6, pairs_per_split=50).train["nlu"].dumps() != a.train["nlu"].dumps()


def test_toy_counts():
    data = generate_toy_sets(pairs_per_split=100, seed=0)
    assert all(len(data.train[s].triplets) == 100 for s in SPLITS)
    assert {rs.split for rs in data.dev.values()} == set(SPLITS)


def _tokens(text):
    return {int(w[1:]) for w in text.split() if w.startswith("w")}


def test_toy_triplet_invariants():
    data = generate_toy_sets(pairs_per_split=200, seed=2)
    world = data.world
    for split, rs in data.train.items():
        for q, p, n in rs.triplets:
            qt, pt, nt = _tokens(rs.queries[q]), _tokens(rs.corpus[p]), _tokens(rs.corpus[n])
            topic = next(t for t in world.split_topics(split) if qt <= set(t.keywords))
            assert pt & nt & set(topic.keywords)
            assert len(pt & set(topic.answers)) == 1
            assert not nt & set(topic.answers)
            assert rs.qrels[q][p] > 0 and rs.qrels[q][n] == 0


def test_toy_topics_disjoint():
    world = build_world(4, 512, 0)
    owned = {s: set().union(*(set(t.keywords) | set(t.answers) for t in world.split_topics(s))) for s in SPLITS}
    for i, a in enumerate(SPLITS):
        for b in SPLITS[i + 1 :]:
            assert not owned[a] & owned[b]


def test_toy_vocab_too_small():
    with pytest.raises(DataError):
        generate_toy_sets(topics_per_split=4, vocab_size=100)


def test_heldout_qrels_cover_split_topics():
    data = generate_toy_sets(pairs_per_split=10, seed=3, queries_per_topic=2, docs_per_topic=3)
    corpora = {id(rs.corpus) for rs in data.test.values()}
    assert len({json.dumps(rs.corpus, sort_keys=True) for rs in data.test.values()}) == 1 and corpora
    for rs in data.test.values():
        assert len(rs.queries) == 8
        assert all(sum(r > 0 for r in rel.values()) == 3 for rel in rs.qrels.values())


# --- dataset files ---


def test_set_roundtrip(tmp_path):
    rs = generate_toy_sets(pairs_per_split=30, seed=4).train["med_real"]
    save_set(rs, tmp_path / "a.jsonl")
    back = load_set(tmp_path / "a.jsonl")
    assert back.dumps() == rs.dumps()
    kinds = {json.loads(line)["kind"] for line in (tmp_path / "a.jsonl").read_text().splitlines()}
    assert kinds == {"doc", "query", "triplet", "qrel"}


def test_set_invariant_errors():
    with pytest.raises(DataError, match="hard negative"):
        RetrievalSet({"p": "x", "n": "y"}, {"q": "z"}, [("q", "p", "n")], {"q": {"p": 1, "n": 1}}, "nlu")
    with pytest.raises(DataError, match="unknown ids"):
        RetrievalSet({"p": "x"}, {"q": "z"}, [("q", "p", "n")], {"q": {"p": 1}}, "nlu")
    with pytest.raises(DataError):
        RetrievalSet({}, {}, [], {}, "legal")
    with pytest.raises(DataError, match="exactly one split"):
        RetrievalSet.loads("")


def test_offline_negative_regeneration(tmp_path):
    data = generate_toy_sets(pairs_per_split=20, seed=6)
    rs = data.train["search"]
    client = ToyNegativeClient(data.world, seed=1)
    out = regenerate_negatives(rs, client, AuditLog(tmp_path / "log.jsonl"), max_workers=2)
    again = regenerate_negatives(rs, ReplayClient(tmp_path / "log.jsonl"))
    assert out.dumps() == again.dumps()
    for q, p, n in out.triplets:
        assert n.endswith("-gen") and out.qrels[q][n] == 0
        topic = next(t for t in data.world.topics if _tokens(out.corpus[p]) & set(t.answers))
        assert not _tokens(out.corpus[n]) & set(topic.answers)
