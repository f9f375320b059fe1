import numpy as np
import pytest

from condrt.assignment import ObservedData, build_complete_randomization, build_crossover_orders
from condrt.conditioning import whole_space
from condrt.engine import LARGE, SMALL, exact_p_value
from condrt.errors import (
    CollinearityError,
    ConfigurationError,
    DegenerateStatisticError,
    ImputabilityError,
    RegistrationError,
)
from condrt.hypothesis import PartialOutcomes, fisher_sharp_null, stepped_wedge_exposure, treatment_exposure
from condrt.statistics import (
    T1_SPEC,
    T2_SPEC,
    T3_SPEC,
    DesignMatrixSpec,
    diff_in_means,
    difference_in_means,
    exposure_regression,
    get_statistic,
    least_squares,
    ols_exposure_coeff,
    register_statistic,
    registered_statistics,
    unregister_statistic,
)
from condrt.stepped_wedge import simulate_stepped_wedge


def test_diff_in_means_examples():
    e = treatment_exposure(4)
    assert diff_in_means(np.array([1, 0, 1, 0]), np.array([2.0, 1.0, 4.0, 3.0]), e) == 1.0
    assert diff_in_means(np.array([1, 0, 1, 0]), np.full(4, 7.0), e) == 0.0


def test_diff_in_means_uses_defined_entries_only():
    e = treatment_exposure(5)
    y = PartialOutcomes(np.array([2.0, 1.0, 4.0, 3.0, 100.0]), np.array([1, 1, 1, 1, 0], dtype=bool))
    assert diff_in_means(np.array([1, 0, 1, 0, 1]), y, e) == 1.0


def test_diff_in_means_degenerate():
    e = treatment_exposure(3)
    with pytest.raises(DegenerateStatisticError, match="order statistics"):
        diff_in_means(np.array([1, 1, 1]), np.arange(3.0), e)


def test_diff_in_means_equals_two_term_ols():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(4, 40))
        e = treatment_exposure(n)
        z = rng.integers(0, 2, n)
        z[0], z[1] = 0, 1
        y = rng.normal(size=n) * rng.uniform(0.1, 10)
        assert ols_exposure_coeff(z, y, T1_SPEC, None, e) == pytest.approx(diff_in_means(z, y, e), abs=1e-10)


def test_normal_equations_hold():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n, k = int(rng.integers(10, 60)), int(rng.integers(1, 6))
        X = rng.normal(size=(n, k))
        y = rng.normal(size=n)
        beta = least_squares(X, y, [f"c{j}" for j in range(k)])
        grad = X.T @ (y - X @ beta)
        assert np.linalg.norm(grad) <= 1e-8 * np.linalg.norm(X.T @ y)


def test_exact_fit_recovered():
    clusters = np.repeat(np.arange(3), 4)
    periods = np.tile(np.arange(4), 3)
    e = stepped_wedge_exposure(3, 4, clusters, periods)
    order = np.array([2, 0, 1])
    d = e(order)
    y = 1.5 + 0.75 * d + np.array([0.0, 0.5, -1.0])[clusters] + 0.25 * periods
    meta = {"cluster": clusters, "period": periods}
    X, names = T3_SPEC.matrix(d, meta, np.arange(12))
    beta = least_squares(X, y, names)
    assert np.abs(y - X @ beta).max() <= 1e-9
    assert ols_exposure_coeff(order, y, T3_SPEC, meta, e) == pytest.approx(0.75, abs=1e-12)


def test_factor_reference_level_is_first_seen():
    meta = {"cluster": np.array([2, 2, 0, 1, 0]), "period": np.zeros(5, int)}
    X, names = DesignMatrixSpec(("intercept", "exposure", "factor(cluster)")).matrix(np.zeros(5), meta, np.arange(5))
    assert names == ["intercept", "exposure", "cluster[0]", "cluster[1]"]
    assert X.shape == (5, 4)


def test_design_spec_validation():
    with pytest.raises(ConfigurationError):
        DesignMatrixSpec(("intercept",))
    with pytest.raises(ConfigurationError):
        DesignMatrixSpec(("exposure", "exposure"))
    with pytest.raises(ConfigurationError):
        DesignMatrixSpec(("exposure", "factor(age)"))


def test_collinearity_names_columns():
    clusters = np.array([0, 0, 1, 1])
    e = treatment_exposure(4)
    meta = {"cluster": clusters}
    # exposure coincides with the cluster[1] dummy
    with pytest.raises(CollinearityError) as exc:
        ols_exposure_coeff(np.array([0, 0, 1, 1]), np.arange(4.0), T2_SPEC, meta, e)
    assert exc.value.columns == ["cluster[1]"]


def test_batch_regression_matches_scalar():
    clusters = np.repeat(np.arange(4), 5)
    periods = np.tile(np.arange(5), 4)
    e = stepped_wedge_exposure(4, 5, clusters, periods)
    meta = {"cluster": clusters, "period": periods}
    m = build_crossover_orders(4)
    y = np.random.default_rng(2).normal(size=20)
    for spec in (T1_SPEC, T2_SPEC, T3_SPEC):
        stat = exposure_regression(e, meta, spec)
        mask = np.ones(20, dtype=bool)
        batch = stat.evaluate_many(m.assignments, np.tile(y, (24, 1)), mask, None)
        scalar = [ols_exposure_coeff(z, y, spec, meta, e) for z in m.assignments]
        np.testing.assert_allclose(batch, scalar, atol=1e-10)


def test_permutation_equivariance():
    rng = np.random.default_rng(3)
    clusters = np.repeat(np.arange(4), 5)
    periods = np.tile(np.arange(5), 4)
    order = np.array([1, 3, 0, 2])
    y = rng.normal(size=20)
    perm = rng.permutation(20)
    e = stepped_wedge_exposure(4, 5, clusters, periods)
    e_p = stepped_wedge_exposure(4, 5, clusters[perm], periods[perm])
    meta = {"cluster": clusters, "period": periods}
    meta_p = {"cluster": clusters[perm], "period": periods[perm]}
    assert diff_in_means(order, y[perm], e_p) == pytest.approx(diff_in_means(order, y, e), abs=1e-12)
    for spec in (T1_SPEC, T2_SPEC, T3_SPEC):
        a = ols_exposure_coeff(order, y, spec, meta, e)
        b = ols_exposure_coeff(order, y[perm], spec, meta_p, e_p)
        assert a == pytest.approx(b, abs=1e-10)


def test_registry_roundtrip_and_duplicates():
    name = "test_max_outcome"
    try:
        st = register_statistic(name, lambda z, y, ctx: float(max(y[i] for i in y.indices)), LARGE)
        assert name in registered_statistics()
        got = get_statistic(name)
        z, y = np.array([1, 0, 1]), np.array([1.0, 5.0, 2.0])
        assert got(z, y, None) == st(z, y, None) == 5.0
        with pytest.raises(RegistrationError):
            register_statistic(name, lambda z, y, ctx: 0.0)
    finally:
        unregister_statistic(name)
    with pytest.raises(RegistrationError):
        get_statistic(name)


def test_registered_statistic_guard_fires():
    name = "test_reads_unit_two"
    try:
        register_statistic(name, lambda z, y, ctx: float(y[2]))
        st = get_statistic(name)
        partial = PartialOutcomes(np.array([1.0, 2.0, 0.0]), np.array([True, True, False]))
        with pytest.raises(ImputabilityError):
            st(np.array([1, 0, 0]), partial, None)
    finally:
        unregister_statistic(name)


def test_builtins_need_exposure_and_honor_orientation():
    with pytest.raises(ConfigurationError):
        get_statistic("T2")
    e = treatment_exposure(4)
    assert get_statistic("diff_in_means", exposure=e).orientation == LARGE
    assert get_statistic("diff_in_means", exposure=e, orientation=SMALL).orientation == SMALL


def test_engine_batch_and_scalar_paths_agree():
    m = build_complete_randomization(8, 4)
    e = treatment_exposure(8)
    y = np.random.default_rng(5).normal(size=8)
    obs = ObservedData(m.assignments[17], y)
    st = difference_in_means(e)
    scalar = type(st)(st.fn, st.orientation, "scalar-only")
    a = exact_p_value(m, whole_space(m), fisher_sharp_null(8), st, obs)
    b = exact_p_value(m, whole_space(m), fisher_sharp_null(8), scalar, obs)
    assert a.p == b.p


def test_t3_recovers_tau_under_trend():
    tau = 0.4
    est, se = [], []
    for s in range(500):
        data, _ = simulate_stepped_wedge(6, patients_per_cell=5, tau=tau, trend=0.3, seed=s)
        X, names = T3_SPEC.matrix(data.treatment, data.meta, np.arange(data.n_units))
        beta = least_squares(X, data.outcome, names)
        resid = data.outcome - X @ beta
        sigma2 = resid @ resid / (X.shape[0] - X.shape[1])
        cov = sigma2 * np.linalg.inv(X.T @ X)
        j = names.index("exposure")
        est.append(beta[j])
        se.append(np.sqrt(cov[j, j]))
    est, se = np.array(est), np.array(se)
    within = np.abs(est - tau) <= 3 * se
    # about 0.3% of fits fall outside 3 SE by chance
    assert within.mean() >= 0.99
    assert abs(est.mean() - tau) <= 3 * est.std(ddof=1) / np.sqrt(len(est))
