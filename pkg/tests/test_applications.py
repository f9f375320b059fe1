import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from condrt.applications import (
    ConformalProblem,
    LeastSquaresScore,
    PredictionSet,
    TwoByTwoTable,
    cond_independence_test,
    conformal_grid,
    conformal_p_value,
    conformal_p_values,
    fisher_exact,
    independence_engine_p_value,
    independence_permutation_test,
    prediction_set,
    table_probability,
    weighted_conformal_weights,
)
from condrt.assignment import ObservedData, build_bernoulli
from condrt.conditioning import count_treated, partition_by_function
from condrt.engine import LARGE, SMALL, Statistic, exact_p_value
from condrt.errors import ConfigurationError, DataError, PositivityError
from condrt.hypothesis import fisher_sharp_null


def all_tables(n_max):
    for n in range(1, n_max + 1):
        for cells in itertools.product(range(n + 1), repeat=3):
            rest = n - sum(cells)
            if rest >= 0:
                yield TwoByTwoTable(*cells, rest)


# -- Fisher -------------------------------------------------------------------


def test_point_probability_example():
    assert table_probability(TwoByTwoTable(3, 1, 1, 3)) == Fraction(16, 70)


def test_tea_tasting():
    assert fisher_exact(TwoByTwoTable(0, 4, 4, 0), "less") == pytest.approx(1 / 70, abs=1e-15)
    assert fisher_exact(TwoByTwoTable(4, 0, 0, 4)) == pytest.approx(1 / 70, abs=1e-15)


def test_three_forms_agree_and_sum_to_one():
    for t in all_tables(9):
        probs = [table_probability(t, f) for f in (1, 2, 3)]
        assert probs[0] == probs[1] == probs[2]
        total = sum(table_probability(t.with_n11(k)) for k in t.n11_range())
        assert total == 1


def test_sides():
    t = TwoByTwoTable(2, 3, 1, 4)
    greater, less = fisher_exact(t, "greater"), fisher_exact(t, "less")
    assert greater + less == pytest.approx(1 + float(table_probability(t)), abs=1e-12)
    assert 0 < fisher_exact(t, "two-sided") <= 1
    assert fisher_exact(TwoByTwoTable(3, 1, 1, 3), "two-sided") == pytest.approx(
        float(1 - table_probability(TwoByTwoTable(2, 2, 2, 2))), abs=1e-12
    )
    with pytest.raises(ConfigurationError):
        fisher_exact(t, "both")


def test_table_validation_and_roundtrip():
    with pytest.raises(DataError):
        TwoByTwoTable(-1, 0, 0, 0)
    t = TwoByTwoTable(1, 2, 3, 4)
    assert TwoByTwoTable.from_data(*t.to_data()) == t
    with pytest.raises(DataError):
        TwoByTwoTable.from_data([0, 2], [1, 1])


def test_fisher_equals_engine_small_tables():
    n11 = Statistic(lambda z, y, ctx: float(y[:][np.asarray(z) == 1].sum()), LARGE, "n11")
    for t in all_tables(7):
        z, y = t.to_data()
        m = build_bernoulli(t.n, 0.5)
        part = partition_by_function(m, count_treated(), batched=True)
        r = exact_p_value(m, part, fisher_sharp_null(t.n), n11, ObservedData(z, y.astype(float)))
        assert r.p == pytest.approx(fisher_exact(t), abs=1e-12)


# -- permutation tests --------------------------------------------------------


def test_independence_direct_equals_engine():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 7))
        z = rng.integers(0, 3, n)
        y = rng.normal(size=n)
        assert independence_permutation_test(z, y).p == independence_engine_p_value(z, y).p


def test_independence_user_statistic_small_is_extreme():
    z = np.array([0, 1, 0, 1, 1])
    y = np.array([1.0, 3.0, 0.5, 2.0, 4.0])
    neg_cov = lambda a, b: -float(np.cov(a, b)[0, 1])
    assert independence_permutation_test(z, y, neg_cov).p == independence_engine_p_value(z, y, neg_cov).p


def test_independence_trivial_cases():
    rng = np.random.default_rng(1)
    assert independence_permutation_test(rng.integers(0, 2, 6), np.ones(6)).p == 1.0
    assert independence_permutation_test(np.ones(6), rng.normal(size=6)).p == 1.0
    assert independence_permutation_test(np.ones(30), rng.normal(size=30), resamples=99).p == 1.0


def test_independence_joint_relabeling_invariance():
    rng = np.random.default_rng(2)
    for _ in range(10):
        z = rng.integers(0, 2, 6)
        y = rng.normal(size=6)
        perm = rng.permutation(6)
        assert independence_permutation_test(z, y).p == independence_permutation_test(z[perm], y[perm]).p


def test_independence_mc_mode():
    rng = np.random.default_rng(3)
    z = rng.integers(0, 2, 40)
    y = z + rng.normal(size=40)
    r = independence_permutation_test(z, y, resamples=999, seed=4)
    assert r.p < 0.05 and r.resamples == 999
    assert round(r.p * 1000) == pytest.approx(r.p * 1000)
    with pytest.raises(ConfigurationError):
        independence_permutation_test(z, y)
    with pytest.raises(DataError):
        independence_permutation_test(z, y[:-1])


def test_cond_independence_reduces_to_permutation_test():
    rng = np.random.default_rng(5)
    n, B = 30, 4000
    x = rng.normal(size=n)
    z = rng.integers(0, 2, n)
    y = 0.3 * z + rng.normal(size=n)
    law = lambda row: [0.5, 0.5]
    a = cond_independence_test(z, y, x, law, resamples=B, seed=1, order_statistics=True)
    b = independence_permutation_test(z, y, resamples=B, seed=2)
    sigma = math.sqrt(2 * b.p * (1 - b.p) / B)
    assert abs(a.p - b.p) <= 3 * sigma + 2 / B


def test_cond_independence_power():
    rng = np.random.default_rng(6)
    rejections = 0
    for s in range(30):
        x = rng.normal(size=200)
        prob = 1 / (1 + np.exp(-x))
        z = (rng.random(200) < prob).astype(int)
        y = z + x + rng.normal(size=200)
        law = lambda row: [1 - 1 / (1 + math.exp(-row)), 1 / (1 + math.exp(-row))]
        stat = lambda zz, yy, xx: abs(float(np.corrcoef(zz, yy - xx)[0, 1]))
        rejections += cond_independence_test(z, y, x, law, statistic=stat, orientation=LARGE, resamples=199, seed=s).p <= 0.05
    assert rejections / 30 > 0.9


def test_cond_independence_validation():
    with pytest.raises(DataError):
        cond_independence_test([0, 2], [1.0, 2.0], [0.0, 0.0], lambda r: [0.5, 0.5])
    with pytest.raises(DataError):
        cond_independence_test([0, 1], [1.0, 2.0], [0.0, 0.0], lambda r: [0.5, 0.6])


# -- conformal ----------------------------------------------------------------


def make_problem(rng, n=20, **kw):
    x = rng.normal(size=n)
    y = 1 + 2 * x + rng.normal(size=n)
    return ConformalProblem(x, y[:-1], **kw), y[-1]


def test_conformal_equal_residuals_gives_one():
    class Flat:
        def __call__(self, X, y):
            return np.ones(len(y))

    prob = ConformalProblem(np.arange(5.0), np.arange(4.0), score=Flat())
    assert conformal_p_value(prob, 10.0) == 1.0


def test_conformal_extreme_candidate():
    rng = np.random.default_rng(7)
    prob, _ = make_problem(rng)
    assert conformal_p_value(prob, 1e6) == pytest.approx(1 / prob.n)


def test_grid_path_matches_refit():
    rng = np.random.default_rng(8)
    prob, _ = make_problem(rng)
    cands = np.linspace(-5, 5, 41)
    fast = conformal_p_values(prob, cands)
    slow = [conformal_p_value(prob, c) for c in cands]
    np.testing.assert_array_equal(fast, slow)


def test_p_value_nonincreasing_in_residual_rank():
    rng = np.random.default_rng(9)
    prob, _ = make_problem(rng)
    score = LeastSquaresScore()
    cands = np.linspace(-10, 10, 201)
    ps = conformal_p_values(prob, cands)
    # rank of the candidate's residual: how many residuals lie strictly below it
    below = np.array([(r < r[-1] - 1e-12 * r.max()).sum() for r in (score(prob.x, np.append(prob.y, c)) for c in cands)])
    order = np.argsort(below, kind="stable")
    assert np.all(np.diff(ps[order]) <= 0)
    assert set(np.unique(below)) > {0}


def test_prediction_set_basics():
    rng = np.random.default_rng(10)
    prob, y_true = make_problem(rng)
    grid = conformal_grid(prob)
    assert grid.size == 513
    ps = prediction_set(prob, 0.1)
    assert isinstance(ps, PredictionSet) and ps.interval is not None
    lo, hi = ps.interval
    assert lo < hi
    with pytest.raises(ConfigurationError):
        prediction_set(prob, 1.5)


def test_weights_trivial_cases():
    rng = np.random.default_rng(11)
    x = rng.normal(size=5)
    same = lambda v: np.exp(-v ** 2)
    w = weighted_conformal_weights(ConformalProblem(x, x[:-1], pi1=same, pi2=same))
    np.testing.assert_allclose(w, 0.2, atol=1e-15)
    w2 = weighted_conformal_weights(
        ConformalProblem(np.array([0.0, 1.0]), np.array([0.0]), pi1=lambda v: np.ones_like(v), pi2=lambda v: 1 + 2 * v)
    )
    np.testing.assert_allclose(w2, [0.25, 0.75], atol=1e-15)


def test_weights_sum_and_scale_invariance():
    rng = np.random.default_rng(12)
    x = rng.normal(size=20)
    pi1 = lambda v: np.exp(-v ** 2 / 2)
    pi2 = lambda v: np.exp(-(v - 1) ** 2 / 2)
    w = weighted_conformal_weights(ConformalProblem(x, x[:-1], pi1=pi1, pi2=pi2))
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    w_scaled = weighted_conformal_weights(
        ConformalProblem(x, x[:-1], pi1=lambda v: 7 * pi1(v), pi2=lambda v: 0.01 * pi2(v))
    )
    np.testing.assert_allclose(w, w_scaled, rtol=1e-12)


def test_weights_positivity():
    with pytest.raises(PositivityError):
        weighted_conformal_weights(
            ConformalProblem(np.array([0.0, 1.0]), np.array([0.0]), pi1=lambda v: v, pi2=lambda v: np.ones_like(v))
        )


def test_conformal_problem_shape_check():
    with pytest.raises(DataError):
        ConformalProblem(np.arange(3.0), np.arange(3.0))
