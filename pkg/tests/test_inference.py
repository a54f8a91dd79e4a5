import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import halfnorm, kstest, norm

from medrobust.inference import (
    EmptyInformativeSetError,
    FdpConfig,
    augmentation_size,
    benjamini_hochberg,
    build_report,
    multiplier_bootstrap_max,
    pointwise_ci,
    screen_informative,
    simultaneous_ci,
    stepdown_fdpex,
    variance_and_t,
)


def test_variance_and_t_example():
    variance, t = variance_and_t(np.array([[1.0], [-1.0]]), [0.3])
    assert variance[0] == 1.0
    assert t[0] == pytest.approx(math.sqrt(2) * 0.3)


def test_zero_column_is_uninformative():
    infl = np.column_stack([np.zeros(5), [1, -1, 2, -2, 0]])
    variance, t = variance_and_t(infl, [0.0, 0.1])
    assert np.isnan(t[0]) and np.isfinite(t[1])
    np.testing.assert_array_equal(screen_informative(variance), [1])


def test_variance_concentration(rng):
    variance, _ = variance_and_t(rng.standard_normal((1000, 400)), np.zeros(400))
    assert np.mean((variance >= 0.85) & (variance <= 1.15)) >= 0.99


def test_screen_examples():
    np.testing.assert_array_equal(screen_informative([0.0, 1.0, 2.0], 0.5), [1, 2])
    np.testing.assert_array_equal(screen_informative([0.0, 1.0, 2.0], 0.0), [0, 1, 2])
    with pytest.raises(EmptyInformativeSetError, match="empty"):
        screen_informative([0.0, 1e-9])


def test_fdp_config_validation():
    with pytest.raises(ValueError):
        FdpConfig(B=100)
    with pytest.raises(ValueError):
        FdpConfig(c=1.0)
    with pytest.raises(ValueError):
        FdpConfig(c0=-1)


def test_bootstrap_single_column_is_half_normal(rng):
    n = 300
    infl = rng.choice([-1.0, 1.0], n) * 2.0
    draws = multiplier_bootstrap_max(infl, [2.0], B=5000, seed=1).draws
    assert kstest(draws, halfnorm.cdf).statistic < 0.05


def test_bootstrap_quantile_ten_columns(rng):
    infl = rng.standard_normal((500, 10))
    sd = np.sqrt((infl**2).mean(0))
    critical_value = multiplier_bootstrap_max(infl, sd, 5000, seed=2).quantile(0.05)
    assert 2.5 <= critical_value <= 3.1
    # independent columns: P(max |Z| <= x) = (2 Phi(x) - 1)^10
    exact = norm.ppf((1 + 0.95 ** (1 / 10)) / 2)
    assert abs(critical_value - exact) < 0.1


def test_bootstrap_determinism(rng):
    infl = rng.standard_normal((50, 3))
    a = multiplier_bootstrap_max(infl, np.ones(3), 500, seed=7).draws
    b = multiplier_bootstrap_max(infl, np.ones(3), 500, seed=7).draws
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, multiplier_bootstrap_max(infl, np.ones(3), 500, seed=8).draws)


def test_quantile_definition():
    from medrobust.inference import BootstrapMax

    d = BootstrapMax(np.arange(1, 201, dtype=float))
    # smallest x with at least 95% of draws <= x
    assert d.quantile(0.05) == 190.0


def test_simultaneous_ci_examples():
    lo, hi = simultaneous_ci(np.array([0.0]), np.array([1.0]), 3.0, 100)
    assert lo[0] == pytest.approx(-0.3) and hi[0] == pytest.approx(0.3)
    plo, phi = pointwise_ci(np.array([0.0]), np.array([1.0]), 100, 0.05)
    assert lo[0] < plo[0] and hi[0] > phi[0]


def test_simultaneous_coverage_under_null():
    n, J, reps = 200, 20, 500
    L = np.linalg.cholesky(0.3 + 0.7 * np.eye(J))
    covered = 0
    for r in range(reps):
        g = np.random.default_rng(1000 + r)
        X = g.standard_normal((n, J)) @ L.T
        estimate = X.mean(0)
        infl = X - estimate
        rep = build_report(infl, estimate, alpha=0.05, config=FdpConfig(B=500, seed=r))
        covered += np.all((rep.sim_low <= 0) & (rep.sim_high >= 0))
    assert covered / reps >= 0.93


def test_augmentation_examples():
    assert augmentation_size(9, 0.1) == 1
    assert augmentation_size(0, 0.1) == 0
    assert augmentation_size(8, 0.1) == 0
    assert augmentation_size(4, 0.5) == 4


def _signal(rng, n=200, J=30, strong=5, shift=0.6):
    X = rng.standard_normal((n, J))
    X[:, :strong] += shift
    estimate = X.mean(0)
    return X - estimate, estimate


def test_stepdown_trace_and_monotonicity(rng):
    infl, estimate = _signal(rng)
    res = stepdown_fdpex(infl, estimate, FdpConfig(B=500, seed=3))
    assert len(res.trace) == len(res.stepdown) + 1
    abs_t = np.abs(res.t)
    remaining = set(range(infl.shape[1]))
    for j in res.stepdown:
        assert all(abs_t[j] >= abs_t[k] for k in remaining)
        remaining.discard(j)
    assert set(range(5)) <= set(res.stepdown)
    assert set(res.augmented).isdisjoint(res.stepdown)
    assert len(res.augmented) == augmentation_size(len(res.stepdown), 0.1)


def test_no_rejection_no_augmentation(rng):
    infl = rng.standard_normal((100, 10))
    res = stepdown_fdpex(infl, np.zeros(10), FdpConfig(B=300))
    assert res.discoveries.size == 0 and res.augmented == []
    assert len(res.trace) == 1


def test_exhausted_set_has_terminal_row():
    n = 100
    g = np.random.default_rng(0)
    infl = g.standard_normal((n, 3))
    res = stepdown_fdpex(infl, np.full(3, 5.0), FdpConfig(B=300))
    assert res.stepdown and len(res.stepdown) == 3
    assert len(res.trace) == 4 and res.trace[-1]["size"] == 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.lists(st.floats(0.01, 100.0), min_size=12, max_size=12))
def test_scale_equivariance(seed, scales):
    infl, estimate = _signal(np.random.default_rng(seed), n=120, J=12, strong=3, shift=0.5)
    lam = np.array(scales)
    cfg = FdpConfig(B=300, seed=seed)
    a = stepdown_fdpex(infl, estimate, cfg)
    b = stepdown_fdpex(infl * lam, estimate * lam, cfg)
    np.testing.assert_allclose(a.t, b.t, rtol=1e-10)
    np.testing.assert_array_equal(a.discoveries, b.discoveries)


def test_stepdown_determinism(rng):
    infl, estimate = _signal(rng)
    cfg = FdpConfig(B=400, seed=11)
    a, b = stepdown_fdpex(infl, estimate, cfg), stepdown_fdpex(infl, estimate, cfg)
    np.testing.assert_array_equal(a.discoveries, b.discoveries)
    assert a.trace == b.trace


def test_small_b_alpha_warns(rng):
    with pytest.warns(RuntimeWarning, match="B \\* alpha"):
        stepdown_fdpex(rng.standard_normal((50, 3)), np.zeros(3), FdpConfig(B=200, alpha=0.01))


def test_tie_break_smallest_index():
    infl = np.column_stack([[1.0, -1.0] * 50] * 3)
    res = stepdown_fdpex(infl, np.full(3, 2.0), FdpConfig(B=300))
    assert res.stepdown == [0, 1, 2]


def test_benjamini_hochberg():
    p = np.array([0.01, 0.04, 0.03, 0.2])
    np.testing.assert_array_equal(benjamini_hochberg(p, 0.1), [True, True, True, False])
    np.testing.assert_array_equal(benjamini_hochberg(np.array([0.5, 0.9]), 0.1), [False, False])


def test_report_contains_pointwise_in_simultaneous(rng):
    infl, estimate = _signal(rng)
    rep = build_report(infl, estimate, alpha=0.05, config=FdpConfig(B=500))
    assert rep.critical_value >= norm.ppf(0.975)
    assert np.all(rep.sim_low <= rep.ci_low) and np.all(rep.sim_high >= rep.ci_high)
    np.testing.assert_allclose(rep.se, np.sqrt(rep.variance / rep.n))
    assert rep.discovered[:5].all()
    assert np.all(rep.p_value[:5] < 1e-4)
