import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from annomap.errors import DegenerateError, InvalidInputError
from annomap.metrics import (
    ScalingParams,
    apply_scaling,
    ccc,
    ccc_columns,
    ccc_gradient,
    entropy_log2,
    fit_scaling,
    paired_t_test,
    pcc,
)

from oracles import lin_ccc, paired_t, pearson, shannon_bits

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def vectors(min_size=2, max_size=30):
    return st.integers(min_size, max_size).flatmap(
        lambda n: st.tuples(st.lists(finite, min_size=n, max_size=n), st.lists(finite, min_size=n, max_size=n))
    )


@pytest.mark.parametrize(
    "x, y, expected",
    [
        ([0.1, 0.5, -0.3], [0.1, 0.5, -0.3], 1.0),
        ([0, 0, 0], [0, 0, 0], 0.0),
        ([1, 2, 3], [2, 3, 4], 4 / 7),
        ([1, 2, 3], [3, 2, 1], -1.0),
    ],
)
def test_ccc_hand_examples(x, y, expected):
    assert ccc(x, y) == pytest.approx(expected, abs=1e-12)


def test_ccc_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        ccc([1, 2], [1, 2, 3])
    with pytest.raises(InvalidInputError):
        ccc([1], [1])
    with pytest.raises(InvalidInputError):
        ccc([1, np.nan], [1, 2])


@given(vectors())
def test_ccc_matches_oracle_and_is_symmetric(xy):
    x, y = xy
    assert ccc(x, y) == pytest.approx(lin_ccc(x, y), abs=1e-9)
    assert ccc(x, y) == pytest.approx(ccc(y, x), abs=1e-12)
    assert -1.0 - 1e-12 <= ccc(x, y) <= 1.0 + 1e-12


@given(st.lists(finite, min_size=2, max_size=40).filter(lambda v: max(v) - min(v) > 1e-3))
def test_ccc_self_is_one(x):
    assert ccc(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ccc_equals_pcc_only_with_matched_moments():
    rng = np.random.default_rng(3)
    x = rng.normal(size=50)
    y = x + rng.normal(scale=0.5, size=50)
    # match mean and sd of y to x
    y_matched = (y - y.mean()) / y.std() * x.std() + x.mean()
    assert ccc(x, y_matched) == pytest.approx(pcc(x, y_matched), abs=1e-12)
    assert abs(ccc(x, y + 1.0)) < abs(pcc(x, y + 1.0))
    assert abs(ccc(x, 2 * y)) < abs(pcc(x, 2 * y))


def test_ccc_columns_agree_with_scalar():
    rng = np.random.default_rng(0)
    preds = rng.normal(size=(20, 4))
    preds[:, 2] = 0.3
    target = rng.normal(size=20)
    cols = ccc_columns(preds, target)
    for j in range(4):
        assert cols[j] == pytest.approx(ccc(preds[:, j], target), abs=1e-12)
    assert abs(cols[2]) < 1e-12


def _fd_gradient(pred, target, h=1e-5):
    g = np.empty_like(pred)
    for i in range(pred.size):
        up, down = pred.copy(), pred.copy()
        up[i] += h
        down[i] -= h
        g[i] = (ccc(up, target) - ccc(down, target)) / (2 * h)
    return g


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-4)


def test_ccc_gradient_identical_vectors():
    p = np.array([1.0, 2.0, 3.0])
    g, degenerate = ccc_gradient(p, p)
    assert not degenerate
    assert _rel_err(g, _fd_gradient(p, p)) < 1e-6


def test_ccc_gradient_degenerate():
    g, degenerate = ccc_gradient([0, 0, 0], [0, 0, 0])
    assert degenerate
    assert np.all(g == 0)


def test_ccc_gradient_random_pairs():
    rng = np.random.default_rng(1234)
    for _ in range(100):
        n = int(rng.integers(2, 65))
        p, t = rng.normal(size=n), rng.normal(size=n)
        g, degenerate = ccc_gradient(p, t)
        assert not degenerate
        assert _rel_err(g, _fd_gradient(p, t)) < 1e-6


@pytest.mark.parametrize(
    "x, y, expected",
    [([1, 2, 3], [2, 4, 6], 1.0), ([1, 2, 3], [3, 2, 1], -1.0), ([1, 2, 3, 4], [1, 3, 2, 4], 0.8)],
)
def test_pcc_examples(x, y, expected):
    assert pcc(x, y) == pytest.approx(expected, abs=1e-12)


def test_pcc_constant_is_degenerate():
    with pytest.raises(DegenerateError):
        pcc([1, 1, 1], [1, 2, 3])


@given(vectors(3).filter(lambda xy: np.ptp(xy[0]) > 1e-3 and np.ptp(xy[1]) > 1e-3))
def test_pcc_matches_oracle(xy):
    x, y = xy
    assert pcc(x, y) == pytest.approx(pearson(x, y), abs=1e-9)


def test_scaling_examples():
    assert fit_scaling([1, 4, 7]) == ScalingParams(1, 7)
    assert fit_scaling([-2, 0, 2]) == ScalingParams(-2, 2)
    with pytest.raises(InvalidInputError):
        fit_scaling([3])
    with pytest.raises(InvalidInputError):
        fit_scaling([2, 2, 2])
    with pytest.raises(InvalidInputError):
        ScalingParams(3, 3)
    p = ScalingParams(1, 7)
    assert apply_scaling(p, 4) == 0.0
    assert apply_scaling(p, 1) == -1.0
    assert apply_scaling(p, 7) == 1.0
    assert apply_scaling(p, 100) == 1.0
    assert apply_scaling(p, -5) == -1.0


@given(st.lists(finite, min_size=2, max_size=30).filter(lambda v: max(v) - min(v) > 1e-6))
def test_scaling_fit_apply_extremes_and_order(v):
    p = fit_scaling(v)
    out = np.asarray(apply_scaling(p, v))
    assert out[np.argmin(v)] == -1.0 and out[np.argmax(v)] == 1.0
    order = np.argsort(v, kind="stable")
    assert np.all(np.diff(out[order]) >= 0)


def test_entropy_examples():
    assert entropy_log2({f"s{i}": 1 for i in range(30)}) == pytest.approx(4.9069, abs=1e-3)
    assert entropy_log2({"a": 30}) == 0.0
    assert entropy_log2({"a": 15, "b": 15}) == 1.0
    with pytest.raises(InvalidInputError):
        entropy_log2({"a": 0})


@given(st.lists(st.integers(0, 50), min_size=1, max_size=20).filter(any))
def test_entropy_oracle_and_bounds(counts):
    h = entropy_log2(counts)
    k = sum(1 for c in counts if c)
    assert h == pytest.approx(shannon_bits(counts), abs=1e-9)
    assert -1e-12 <= h <= math.log2(k) + 1e-12


@pytest.mark.parametrize("k", [1, 2, 5, 30])
def test_entropy_uniform_is_log2k(k):
    assert entropy_log2([7] * k) == pytest.approx(math.log2(k), abs=1e-12)


def test_paired_t_examples():
    r = paired_t_test([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    assert r.t_statistic == pytest.approx(4.2426, abs=1e-4)
    assert r.degrees_of_freedom == 4
    assert r.p_value == pytest.approx(0.0132, abs=1e-4)
    assert r.significant_at_95
    r = paired_t_test([1, -1, 1, -1], [0, 0, 0, 0])
    assert r.t_statistic == 0.0 and r.p_value == pytest.approx(1.0) and not r.significant_at_95
    with pytest.raises(DegenerateError):
        paired_t_test([0.1, 0.2, 0.3], [0.1, 0.2, 0.3])


@settings(max_examples=200)
@given(vectors(2, 40).filter(lambda ab: np.std(np.subtract(*ab)) > 1e-6))
def test_paired_t_against_scipy_and_oracle(ab):
    a, b = ab
    r = paired_t_test(a, b)
    ref = stats.ttest_rel(a, b)
    t, df = paired_t(a, b)
    assert r.degrees_of_freedom == df
    assert r.t_statistic == pytest.approx(t, rel=1e-9, abs=1e-9)
    assert r.p_value == pytest.approx(ref.pvalue, abs=1e-9)
    flipped = paired_t_test(b, a)
    assert flipped.t_statistic == pytest.approx(-r.t_statistic, rel=1e-12, abs=1e-12)
    assert flipped.p_value == pytest.approx(r.p_value, abs=1e-12)
    assert r.significant_at_95 == (r.p_value < 0.05)


def test_p_value_monotone_in_t():
    ps = [paired_t_test([d, d + 1, d + 2, d + 3], [0, 0, 0, 0]).p_value for d in np.linspace(0, 3, 10)]
    assert all(b <= a for a, b in zip(ps, ps[1:]))
