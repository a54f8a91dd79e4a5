import dataclasses

import numpy as np
import pytest
from scipy.stats import linregress

from medrobust.config import RunConfig
from medrobust.data import CohortDataset
from medrobust.harness import (
    CANONICAL_PIPELINES,
    IntraKind,
    MetricsTable,
    analyze_cohort,
    derive_outcomes,
    derived_bias_diagnostic,
    estimates_tsv,
    get_pipeline,
    metrics_tsv,
    ols_treatment_effect,
    replicate,
    robustness_nde,
    run_inter,
    run_pipeline,
)
from medrobust.simulation import DgpConfig, gen_cohort


def test_pipeline_registry():
    five = {"12p+Linear", "12p+Linear M", "12p Scrub+Linear", "12p Scrub+Linear M", "SL+AIPW"}
    assert five <= set(CANONICAL_PIPELINES)
    assert get_pipeline("sl_aipw").label == "SL+AIPW"
    with pytest.raises(ValueError, match="unknown method"):
        get_pipeline("lasso")


def test_ols_exact_and_against_linregress(rng):
    A = np.array([0, 1] * 10)
    est, se, p = ols_treatment_effect(2.0 * A, A, np.zeros((20, 0)))
    assert est[0] == pytest.approx(2.0) and p[0] < 1e-12
    y = rng.normal(size=60)
    A = rng.integers(0, 2, 60)
    est, se, _ = ols_treatment_effect(y, A, np.zeros((60, 0)))
    ref = linregress(A, y)
    assert est[0] == pytest.approx(ref.slope, abs=1e-12)
    assert se[0] == pytest.approx(ref.stderr, abs=1e-12)


def test_ols_null_rejection_rate():
    hits = 0
    for r in range(1000):
        g = np.random.default_rng(r)
        W = g.normal(size=(80, 3))
        A = g.integers(0, 2, 80)
        hits += ols_treatment_effect(g.normal(size=80), A, W)[2][0] < 0.05
    assert 0.035 <= hits / 1000 <= 0.065


def test_failed_replication_when_arm_empty(small_cohort):
    cohort, truth = small_cohort
    treated = CohortDataset(tuple(dataclasses.replace(s, treatment=1) for s in cohort))
    res = run_pipeline(treated, "12p+Linear", outcomes=[0, 1])
    assert res.failed and "arm" in res.message
    assert np.all(np.isnan(res.estimate))
    assert run_inter(np.ones((5, 1)), np.zeros(5), np.zeros(5), np.zeros((5, 3)), "aipw").failed


def _table(est, truth, failed=None):
    R = est.shape[0]
    failed = np.zeros(R, bool) if failed is None else failed
    p = np.where(np.abs(est - truth) > 0.2, 0.01, 0.5)
    return MetricsTable(("m",), (0,), np.array([truth]), {"m": est}, {"m": est * 0},
                        {"m": p}, {"m": failed}, {"m": np.zeros(R, int)}, np.arange(R))


def test_mse_identity_and_failures(rng):
    est = rng.normal(0.4, 0.1, size=(50, 1))
    cell = _table(est, 0.3).cell("m", 0)
    R = cell["n_ok"]
    assert cell["mse"] == pytest.approx(cell["bias"] ** 2 + cell["sd"] ** 2 * (R - 1) / R, abs=1e-10)
    failed = np.zeros(50, bool)
    failed[:5] = True
    est2 = est.copy()
    est2[:5] = np.nan
    cell2 = _table(est2, 0.3, failed).cell("m", 0)
    assert cell2["n_ok"] == 45 and cell2["n_failed"] == 5
    assert cell2["bias"] == pytest.approx(est[5:, 0].mean() - 0.3)


def test_replicate_prefix_stable_and_deterministic():
    cfg = DgpConfig(n=30, T=60)
    pipes = ("12p+Linear", "12p Scrub+Linear M")
    short = replicate(cfg, pipes, R=2, base_seed=5, threads=1)
    long = replicate(cfg, pipes, R=4, base_seed=5, threads=1)
    for lbl in short.labels:
        np.testing.assert_array_equal(short.estimates[lbl], long.estimates[lbl][:2])
    np.testing.assert_array_equal(short.seeds, long.seeds[:2])
    again = replicate(cfg, pipes, R=2, base_seed=5, threads=1)
    assert metrics_tsv(again) == metrics_tsv(short)
    assert estimates_tsv(again) == estimates_tsv(short)
    with pytest.raises(ValueError):
        replicate(cfg, pipes, R=1)


def test_replicate_parallel_matches_serial():
    cfg = DgpConfig(n=30, T=60)
    a = replicate(cfg, ("12p+Linear",), R=3, base_seed=2, threads=1)
    b = replicate(cfg, ("12p+Linear",), R=3, base_seed=2, threads=2)
    np.testing.assert_array_equal(a.estimates["12p+Linear"], b.estimates["12p+Linear"])


def test_bias_diagnostic_known_f_and_real_data(small_cohort):
    rows = derived_bias_diagnostic(DgpConfig(n=20, T=100, seed=2), [100], intra=IntraKind.KNOWN_F)
    assert rows[0]["f_part"] == 0.0
    cohort, _ = small_cohort
    with pytest.raises(TypeError):
        derived_bias_diagnostic(cohort, [100])


def test_bias_diagnostic_decreases_with_T_and_favours_ensemble():
    src = DgpConfig(n=200, T=300, seed=1)
    ens = derived_bias_diagnostic(src, [300, 600], intra="ensemble")
    assert ens[1]["total"] < ens[0]["total"]
    assert ens[1]["mean_max_abs_error"] < ens[0]["mean_max_abs_error"]
    lin = derived_bias_diagnostic(src, [600], intra="12p")
    assert ens[1]["f_part"] < lin[0]["f_part"]


def test_scrub_exclusions_are_counted():
    cfg = RunConfig()
    cfg.intra.fd_threshold = 1.5  # aggressive threshold forces exclusions
    cohort, truth = gen_cohort(DgpConfig(n=30, T=60, seed=3))
    d = derive_outcomes(cohort, "12p_scrub", cfg, 0, truth)
    assert d.n_excluded > 0 and d.usable.sum() == 30 - d.n_excluded
    res = run_pipeline(cohort, "12p Scrub+Linear", cfg, outcomes=[0, 1], derived=d)
    assert res.n_excluded == d.n_excluded and res.n_used == 30 - d.n_excluded


def test_analyze_cohort_screens_every_outcome(small_cohort):
    cohort, _ = small_cohort
    cfg = RunConfig()
    cfg.inference.boot_b = 300
    res = analyze_cohort(cohort, cfg, ["nde", "nie", "ate"])
    reps = res.reports
    assert reps["nde"].informative.all()
    np.testing.assert_allclose(reps["ate"].estimate, reps["nde"].estimate + reps["nie"].estimate,
                               atol=1e-12)


def test_robustness_nde_exact_oracle_is_unbiased():
    est = np.array([robustness_nde(2000, s, ("prop_w", "prop_mw", "outcome", "seqreg"),
                                   prop_scale=0.0, reg_scale=0.0) for s in range(40)])
    assert np.all(np.abs(est.mean(0) - [0.3, 0.0]) < 0.03)
    with pytest.raises(ValueError):
        robustness_nde(100, 0, ("density",))
