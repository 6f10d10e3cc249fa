import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ties_scalar
from stm.merge import (
    MergeError,
    MergeRecipe,
    TaskVector,
    elect_sign,
    linear_merge,
    merge,
    task_arithmetic_merge,
    task_vector,
    ties_merge,
    trim,
)
from stm.tensor_store import Checkpoint, IncompatibleCheckpoints


def ck(*values, name="x"):
    return Checkpoint({name: list(values)})


def tv(*values):
    return TaskVector(ck(*values))


def vals(c, name="x"):
    return c[name].astype(np.float64)


# --- linear ---


def test_linear_one_expert_bit_exact():
    e = Checkpoint({"w": [[0.1, -0.0], [3.3, 1e-30]]})
    assert linear_merge([e], [1.0]).same_tensors(e)


def test_linear_two_halves():
    np.testing.assert_allclose(vals(linear_merge([ck(1, 2), ck(3, 4)], [0.5, 0.5])), [2, 3])


def test_linear_three_experts_oracle():
    experts = [[1, 2], [3, 4], [5, 6]]
    weights = [0.2, 0.3, 0.5]
    oracle = [sum(w * e[i] for w, e in zip(weights, experts)) for i in range(2)]
    got = vals(linear_merge([ck(*e) for e in experts], weights))
    assert oracle == pytest.approx([3.6, 4.6])
    np.testing.assert_allclose(got, oracle, atol=1e-6)


def test_linear_not_renormalized():
    np.testing.assert_allclose(vals(linear_merge([ck(1.0), ck(1.0)], [0.9, 0.9])), [1.8], atol=1e-6)


@pytest.mark.parametrize("w", [-0.1, 1.1, float("nan")])
def test_weight_range(w):
    with pytest.raises(MergeError):
        linear_merge([ck(1.0)], [w])


def test_incompatible_experts():
    with pytest.raises(IncompatibleCheckpoints):
        linear_merge([ck(1.0), ck(1.0, 2.0)], [0.5, 0.5])


# --- task arithmetic ---


def test_task_vector_examples():
    assert not vals(task_vector(ck(1, 2), ck(1, 2)).delta).any()
    np.testing.assert_array_equal(vals(task_vector(ck(3, 4), ck(1, 1)).delta), [2, 3])


def test_task_vector_inverse():
    rng = np.random.default_rng(0)
    base = Checkpoint({"w": rng.normal(size=(4, 5))})
    expert = Checkpoint({"w": rng.normal(size=(4, 5))})
    back = task_arithmetic_merge(base, [task_vector(expert, base)], [1.0])
    np.testing.assert_array_max_ulp(back["w"], expert["w"], maxulp=1)


def test_task_arithmetic_zero_weights_bit_exact():
    base = Checkpoint({"w": [[-0.0, 1.25]], "b": [3.0]})
    taus = [TaskVector(Checkpoint({"w": [[1.0, 2.0]], "b": [5.0]})), TaskVector(Checkpoint({"w": [[7.0, 1.0]], "b": [1.0]}))]
    assert task_arithmetic_merge(base, taus, [0.0, 0.0]).same_tensors(base)


def test_task_arithmetic_oracle():
    got = task_arithmetic_merge(ck(0, 0), [tv(1, -2), tv(3, 1)], [0.5, 0.5])
    np.testing.assert_allclose(vals(got), [2, -0.5])


# --- Ties ---


def test_trim_examples():
    np.testing.assert_array_equal(vals(trim(tv(1.0, -0.2, 0.5), 2 / 3).delta), [1.0, 0.0, 0.5])
    np.testing.assert_array_equal(vals(trim(tv(1.0, -0.2, 0.5), 1.0).delta), vals(ck(1.0, -0.2, 0.5)))
    assert not vals(trim(tv(0, 0, 0), 0.3).delta).any()


def test_trim_ties_keep_lower_index():
    np.testing.assert_array_equal(vals(trim(tv(1.0, -1.0, 1.0, 0.5), 0.5).delta), [1.0, -1.0, 0.0, 0.0])


def test_trim_keeps_at_least_one():
    np.testing.assert_array_equal(trim(tv(0.1, 0.3, 0.2), 0.01).delta["x"], np.float32([0.0, 0.3, 0.0]))


def test_trim_is_per_tensor():
    tau = TaskVector(Checkpoint({"a": [10.0, 20.0], "b": [0.1, 0.2]}))
    out = trim(tau, 0.5).delta
    np.testing.assert_array_equal(vals(out, "a"), [0.0, 20.0])
    np.testing.assert_allclose(vals(out, "b"), [0.0, 0.2])


def test_elect_sign_examples():
    assert elect_sign([tv(2.0, -1.0, 0.0)], [1.0])["x"].tolist() == [1, -1, 0]
    assert elect_sign([tv(1.0), tv(-1.0)], [1.0, 1.0])["x"].tolist() == [0]
    assert elect_sign([tv(1.0, 0, 0.5), tv(-0.8, 0, 0.7)], [1.0, 1.0])["x"].tolist() == [1, 0, 1]


def test_ties_hand_trace():
    got = ties_merge(ck(0, 0, 0), [tv(1.0, -0.2, 0.5), tv(-0.8, 0.1, 0.7)], [1.0, 1.0], [2 / 3, 2 / 3])
    np.testing.assert_allclose(vals(got), [1.0, 0.0, 0.6], atol=1e-6)


def test_ties_single_expert_matches_task_arithmetic():
    rng = np.random.default_rng(3)
    base = Checkpoint({"w": rng.normal(size=(3, 4))})
    tau = TaskVector(Checkpoint({"w": rng.normal(size=(3, 4))}))
    a = ties_merge(base, [tau], [1.0], [1.0])
    b = task_arithmetic_merge(base, [tau], [1.0])
    np.testing.assert_allclose(vals(a, "w"), vals(b, "w"), atol=1e-6)


def test_ties_duplicated_vector():
    base = ck(1.0, 2.0, 3.0)
    tau = tv(0.5, -0.25, 0.0)
    got = ties_merge(base, [tau, tau, tau], [0.3, 0.3, 0.3], [1.0, 1.0, 1.0])
    np.testing.assert_allclose(vals(got), [1.5, 1.75, 3.0], atol=1e-6)


def test_ties_all_zero_weights_is_degenerate():
    with pytest.raises(MergeError, match="degenerate"):
        ties_merge(ck(0.0), [tv(1.0)], [0.0], [1.0])


def test_ties_zero_weight_removes_expert():
    base = ck(0.0, 0.0)
    a = ties_merge(base, [tv(1.0, -2.0), tv(-5.0, 3.0)], [0.7, 0.0], [1.0, 1.0])
    b = ties_merge(base, [tv(1.0, -2.0)], [0.7], [1.0])
    assert a.same_tensors(b)


# --- recipes ---


def test_recipe_validation():
    with pytest.raises(MergeError):
        MergeRecipe("ties", ["a"], [0.5])
    with pytest.raises(MergeError):
        MergeRecipe("linear", ["a"], [0.5], [0.5])
    with pytest.raises(MergeError):
        MergeRecipe("ties", ["a"], [0.5], [0.0])
    with pytest.raises(MergeError):
        MergeRecipe("soup", ["a"], [0.5])
    with pytest.raises(MergeError):
        MergeRecipe("linear", ["a", "a"], [0.5, 0.5])


def test_recipe_json_roundtrip_and_metadata():
    r = MergeRecipe("ties", ["b", "a"], [0.3, 0.6], [0.5, 0.9])
    assert MergeRecipe.from_json(r.to_json()) == r
    experts = {"a": ck(1.0, 2.0), "b": ck(0.0, 1.0)}
    out = merge(r, experts, ck(0.5, 0.5))
    assert json.loads(out.meta["merge_recipe"]) == r.to_dict()
    assert out.meta["ties_aggregation"] == "alpha_weighted_mean_over_sign_agreeing"


def test_merge_requires_base_for_delta_methods():
    with pytest.raises(MergeError):
        merge(MergeRecipe("task_arithmetic", ["a"], [1.0]), {"a": ck(1.0)})
    with pytest.raises(MergeError, match="unknown experts"):
        merge(MergeRecipe("linear", ["z"], [1.0]), {"a": ck(1.0)})


# --- properties ---

small = st.floats(-4, 4, allow_nan=False, width=32)
unit = st.sampled_from([round(0.1 * i, 1) for i in range(11)])
dens = st.sampled_from([round(0.1 * i, 1) for i in range(1, 11)])


@st.composite
def ties_case(draw, max_k=4, max_n=6):
    n = draw(st.integers(1, max_n))
    k = draw(st.integers(1, max_k))
    base = draw(st.lists(small, min_size=n, max_size=n))
    taus = [draw(st.lists(small, min_size=n, max_size=n)) for _ in range(k)]
    weights = draw(st.lists(unit, min_size=k, max_size=k).filter(lambda w: any(w)))
    densities = draw(st.lists(dens, min_size=k, max_size=k))
    return base, taus, weights, densities


@settings(max_examples=150, deadline=None)
@given(ties_case())
def test_ties_matches_scalar_oracle(case):
    base, taus, weights, densities = case
    b32 = np.float32(base).astype(float).tolist()
    t32 = [np.float32(t).astype(float).tolist() for t in taus]
    got = ties_merge(ck(*base), [tv(*t) for t in taus], weights, densities)
    want = ties_scalar(b32, t32, weights, densities)
    np.testing.assert_allclose(vals(got), want, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(ties_case(), st.randoms(use_true_random=False))
def test_permutation_equivariance(case, rnd):
    base, taus, weights, densities = case
    ids = [f"e{i}" for i in range(len(taus))]
    perm = list(range(len(taus)))
    rnd.shuffle(perm)
    experts = {i: ck(*t) for i, t in zip(ids, taus)}
    for method in ("linear", "task_arithmetic", "ties"):
        dens_ = densities if method == "ties" else []
        a = merge(MergeRecipe(method, ids, weights, dens_), experts, ck(*base))
        pdens = [dens_[p] for p in perm] if dens_ else []
        b = merge(MergeRecipe(method, [ids[p] for p in perm], [weights[p] for p in perm], pdens), experts, ck(*base))
        assert a.same_tensors(b)


@settings(max_examples=80, deadline=None)
@given(st.lists(small, min_size=1, max_size=8), dens)
def test_trim_idempotent(values, d):
    once = trim(tv(*values), d)
    assert trim(once, d).delta.same_tensors(once.delta)


@settings(max_examples=80, deadline=None)
@given(st.lists(small, min_size=1, max_size=6), st.integers(1, 5), st.data())
def test_linear_one_hot_and_convex_identical(values, k, data):
    e = ck(*values)
    others = [ck(*data.draw(st.lists(small, min_size=len(values), max_size=len(values)))) for _ in range(k - 1)]
    pos = data.draw(st.integers(0, k - 1))
    experts = others[:pos] + [e] + others[pos:]
    onehot = [1.0 if i == pos else 0.0 for i in range(k)]
    assert linear_merge(experts, onehot).same_tensors(e)
    same = linear_merge([e] * k, [1.0 / k] * k)
    np.testing.assert_allclose(vals(same), vals(e), atol=1e-6)


@settings(max_examples=80, deadline=None)
@given(ties_case())
def test_merge_outputs_finite(case):
    base, taus, weights, densities = case
    for out in (
        linear_merge([ck(*t) for t in taus], weights),
        task_arithmetic_merge(ck(*base), [tv(*t) for t in taus], weights),
        ties_merge(ck(*base), [tv(*t) for t in taus], weights, densities),
    ):
        assert np.isfinite(vals(out)).all()
