import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import info_nce_naive
from stm.encoder import (
    EOS_ID,
    EncoderConfig,
    EncoderError,
    Tokenizer,
    TripletBatch,
    cosine_sim,
    encode,
    info_nce_loss,
    init_base_params,
)
from stm.lora import init_adapter
from stm.trainer import grad_check

SMALL = EncoderConfig(vocab_size=40, dim=8, n_layers=1, max_len=10, ffn_dim=12)


def _batch(rng, n, cfg, max_len=6):
    def seq():
        length = int(rng.integers(1, max_len))
        return tuple(int(x) for x in rng.integers(2, cfg.vocab_size, size=length)) + (EOS_ID,)

    return TripletBatch(*(tuple(seq() for _ in range(n)) for _ in range(3)))


def _trained_adapter(base, seed):
    # non-zero B so gradients w.r.t. A are non-trivial too
    ad = init_adapter(base, rank=2, alpha_lora=4.0, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for name, (a, b) in ad.factors.items():
        b[...] = rng.normal(0.0, 0.05, size=b.shape)
    return ad


# --- encode ---


def test_single_token_pooling_agrees():
    base = init_base_params(SMALL, 0)
    eos = encode(base, (EOS_ID,), SMALL)
    mean = encode(base, (EOS_ID,), EncoderConfig(**{**SMALL.to_dict(), "pooling": "mean"}))
    np.testing.assert_array_equal(eos, mean)


def test_encode_deterministic_and_unnormalized():
    base = init_base_params(SMALL, 0)
    a = encode(base, (5, 6, 7, EOS_ID), SMALL)
    b = encode(base, (5, 6, 7, EOS_ID), SMALL)
    assert a.shape == (SMALL.dim,)
    np.testing.assert_array_equal(a, b)
    assert not math.isclose(np.linalg.norm(a), 1.0)


def test_zero_layer_mean_is_permutation_invariant():
    cfg = EncoderConfig(**{**SMALL.to_dict(), "n_layers": 0, "pooling": "mean"})
    base = init_base_params(cfg, 1)
    a = encode(base, (5, 9, 13, EOS_ID), cfg)
    b = encode(base, (13, 9, 5, EOS_ID), cfg)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_bidirectional_eos_is_order_blind_but_token_sensitive():
    base = init_base_params(SMALL, 1)
    a = encode(base, (5, 9, 13, EOS_ID), SMALL)
    b = encode(base, (13, 9, 5, EOS_ID), SMALL)
    # no positions: bidirectional single-head attention is order-blind at the EOS slot
    np.testing.assert_allclose(a, b, atol=1e-12)
    c = encode(base, (5, 9, 14, EOS_ID), SMALL)
    assert not np.allclose(a, c)


def test_causal_eos_differs_from_bidirectional_mean():
    causal = EncoderConfig(**{**SMALL.to_dict(), "mask_mode": "causal", "pooling": "mean"})
    bidir = EncoderConfig(**{**SMALL.to_dict(), "pooling": "mean"})
    base = init_base_params(SMALL, 2)
    seq = (5, 9, 13, EOS_ID)
    assert not np.allclose(encode(base, seq, causal), encode(base, seq, bidir))
    # the first position only attends to itself under the causal mask
    one = encode(base, (5,), causal)
    np.testing.assert_allclose(one, encode(base, (5,), bidir), atol=1e-12)


def test_encode_errors():
    base = init_base_params(SMALL, 0)
    with pytest.raises(EncoderError):
        encode(base, (99, EOS_ID), SMALL)
    with pytest.raises(EncoderError):
        encode(base, (3,) * 10 + (EOS_ID,), SMALL)
    with pytest.raises(EncoderError):
        EncoderConfig(max_len=1)
    with pytest.raises(EncoderError):
        EncoderConfig(pooling="cls")


def test_tokenizer_keeps_tail_and_appends_eos():
    tok = Tokenizer(vocab_size=50, max_len=4)
    assert tok.encode("w10 w11 ?") == (10, 11, 1, EOS_ID)
    assert tok.encode("w3 w4 w5 w6 w7") == (5, 6, 7, EOS_ID)
    word = tok.word_id("hello")
    assert 2 <= word < 50 and word == tok.word_id("hello")


def test_triplet_batch_requires_eos():
    with pytest.raises(EncoderError):
        TripletBatch(((3, 4),), ((3, EOS_ID),), ((3, EOS_ID),))


# --- cosine ---


def test_cosine_examples():
    u = np.array([0.3, -1.2, 2.0])
    assert cosine_sim(u, u) == pytest.approx(1.0)
    assert cosine_sim([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_sim([1, 2], [2, 1]) == pytest.approx(0.8, abs=1e-15)
    with pytest.raises(EncoderError):
        cosine_sim([0.0, 0.0], [1.0, 0.0])


# --- InfoNCE ---


def test_info_nce_equal_similarities_is_ln2():
    assert info_nce_loss([[0.37]], [0.37]) == pytest.approx(math.log(2), abs=1e-12)


def test_info_nce_separated_pair():
    assert info_nce_loss([[1.0]], [-1.0]) == pytest.approx(math.log1p(math.exp(-2)), abs=1e-12)
    assert info_nce_loss([[1.0]], [-1.0]) == pytest.approx(0.1269, abs=1e-4)


def test_info_nce_denominator_includes_every_positive():
    pos = np.array([[0.5, 0.1], [0.2, 0.9]])
    hard = np.array([-0.3, 0.4])
    want = 0.0
    for i in range(2):
        denom = math.exp(hard[i]) + math.exp(pos[i, 0]) + math.exp(pos[i, 1])
        want += -math.log(math.exp(pos[i, i]) / denom)
    assert info_nce_loss(pos, hard) == pytest.approx(want / 2, abs=1e-12)


sims = st.floats(-1, 1, allow_nan=False)


@st.composite
def sim_batch(draw, max_n=8):
    n = draw(st.integers(1, max_n))
    pos = [draw(st.lists(sims, min_size=n, max_size=n)) for _ in range(n)]
    hard = draw(st.lists(sims, min_size=n, max_size=n))
    return np.array(pos), np.array(hard)


@settings(max_examples=200, deadline=None)
@given(sim_batch(), st.floats(0.05, 5.0))
def test_info_nce_matches_naive_oracle(batch, t):
    pos, hard = batch
    assert info_nce_loss(pos, hard, t) == pytest.approx(info_nce_naive(pos.tolist(), hard.tolist(), t), abs=1e-10, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(sim_batch(), st.floats(0.05, 5.0))
def test_info_nce_positive(batch, t):
    assert info_nce_loss(*batch, t) > 0


@settings(max_examples=100, deadline=None)
@given(sim_batch(), st.randoms(use_true_random=False))
def test_info_nce_batch_order_invariant(batch, rnd):
    pos, hard = batch
    perm = list(range(len(hard)))
    rnd.shuffle(perm)
    p = np.array(perm)
    assert info_nce_loss(pos[np.ix_(p, p)], hard[p]) == pytest.approx(info_nce_loss(pos, hard), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(sim_batch(), st.floats(0.1, 4.0), st.floats(0.25, 4.0))
def test_temperature_scaling_identity(batch, t, c):
    pos, hard = batch
    assert info_nce_loss(pos, hard, t / c) == pytest.approx(info_nce_loss(pos * c, hard * c, t), abs=1e-10)


# --- gradient check ---


def test_grad_check_rejects_bad_eps():
    base = init_base_params(SMALL, 0)
    ad = init_adapter(base, 2, 4.0)
    batch = _batch(np.random.default_rng(0), 2, SMALL)
    with pytest.raises(ValueError):
        grad_check(base, ad, batch, SMALL, eps=0.0)


def test_grad_check_zero_layer():
    cfg = EncoderConfig(vocab_size=40, dim=8, n_layers=0, max_len=10)
    base = init_base_params(cfg, 3)
    batch = _batch(np.random.default_rng(3), 4, cfg)
    assert grad_check(base, _trained_adapter(base, 3), batch, cfg, n_coords=100) < 1e-7


@pytest.mark.parametrize("mask", ["bidirectional", "causal"])
@pytest.mark.parametrize("pooling", ["eos", "mean"])
def test_grad_check_one_layer(mask, pooling):
    cfg = EncoderConfig(vocab_size=40, dim=8, n_layers=1, max_len=10, ffn_dim=12, mask_mode=mask, pooling=pooling)
    base = init_base_params(cfg, 4)
    batch = _batch(np.random.default_rng(4), 4, cfg)
    assert grad_check(base, _trained_adapter(base, 4), batch, cfg, n_coords=100, temperature=0.5) < 1e-4


def test_grad_check_two_layers():
    cfg = EncoderConfig(vocab_size=40, dim=8, n_layers=2, max_len=10, ffn_dim=12)
    base = init_base_params(cfg, 5)
    batch = _batch(np.random.default_rng(5), 3, cfg)
    assert grad_check(base, _trained_adapter(base, 5), batch, cfg, n_coords=100) < 1e-4
