import numpy as np
import pytest
from sklearn.base import clone

from medrobust.estimator import (
    ATE,
    NDE,
    NIE,
    CausalTarget,
    CrossFitContractError,
    MediationAIPW,
    aipw_component,
    aipw_terms,
    crossfit_predictions,
    estimate_target,
    fit_nuisances,
    make_folds,
)
from medrobust.simulation import DgpConfig, gen_subject_level, oracle_nuisances


@pytest.fixture(scope="module")
def observed():
    sub = gen_subject_level(DgpConfig(n=300, T=20, seed=21))
    return sub["W"], sub["A"], sub["M"], sub["Y"][:, :2]


def test_target_parsing():
    assert CausalTarget.parse("NDE") == NDE
    assert CausalTarget.parse("psi:1:0").components == (((1, 0), 1.0),)
    assert dict(ATE.components) == {(1, 1): 1.0, (0, 0): -1.0}
    with pytest.raises(ValueError):
        CausalTarget.parse("cde")


def test_folds_balanced_small():
    A = np.array([0, 1] * 5)
    plan = make_folds(10, 5, A, seed=0)
    for k in range(5):
        te = plan.test_index(k)
        assert sorted(A[te]) == [0, 1]
        np.testing.assert_array_equal(np.sort(np.r_[te, plan.train_index(k)]), np.arange(10))


def test_folds_unbalanced_cohort_shape():
    A = np.zeros(128, dtype=int)
    A[:27] = 1
    plan = make_folds(128, 5, A, seed=3)
    counts = [int(A[plan.test_index(k)].sum()) for k in range(5)]
    assert set(counts) <= {5, 6}
    sizes = np.bincount(plan.fold_of)
    assert sizes.max() - sizes.min() <= 1
    np.testing.assert_array_equal(make_folds(128, 5, A, seed=3).fold_of, plan.fold_of)


def test_folds_reduce_k_with_warning():
    A = np.array([1, 1, 1] + [0] * 20)
    with pytest.warns(RuntimeWarning, match="reducing"):
        plan = make_folds(23, 5, A, seed=0)
    assert plan.K == 3 and plan.requested_K == 5
    with pytest.raises(ValueError):
        make_folds(5, 5, np.zeros(5), seed=0)


def test_a_equal_a_prime_is_standard_aipw(rng):
    n = 50
    A = rng.integers(0, 2, n)
    Y = rng.normal(size=(n, 2))
    p_w, p_mw = rng.uniform(0.2, 0.8, (2, n))
    outcome, seqreg = rng.normal(size=(2, n, 2))
    t = aipw_terms(1, 1, Y, A, p_w, p_mw, outcome, seqreg)
    std = (A == 1)[:, None] / p_w[:, None] * (Y - seqreg) + seqreg
    np.testing.assert_allclose(t, std, atol=1e-12)


def test_constant_everything_gives_constant(rng):
    n = 40
    A = rng.integers(0, 2, n)
    c = np.full((n, 1), 1.7)
    t = aipw_terms(1, 0, c, A, rng.uniform(0.1, 0.9, n), rng.uniform(0.1, 0.9, n), c, c)
    assert np.all(t == 1.7)


def test_constant_outcome_through_learned_pipeline(observed):
    W, A, M, _ = observed
    res = estimate_target(W, A, M, np.full(len(A), 2.5), "psi:1:0", seed=1)
    assert res.estimate[0] == pytest.approx(2.5, abs=1e-10)


def test_oracle_counterfactual_mean_and_nde_at_n5000():
    sub = gen_subject_level(DgpConfig(n=5000, T=20, seed=31))
    W, A, M, Y = sub["W"], sub["A"], sub["M"], sub["Y"][:, :2]
    o = oracle_nuisances()
    pw, pmw = o.p_treat_w(W), o.p_treat_mw(M, W)
    means = {}
    for a, ap in [(1, 0), (0, 0)]:
        outcome = np.column_stack([o.outcome_mean(j, M, a, W) for j in range(2)])
        seqreg = np.column_stack([o.seqreg_mean(j, a, ap, W) for j in range(2)])
        means[(a, ap)] = aipw_terms(a, ap, Y, A, pw, pmw, outcome, seqreg).mean(0)
    assert abs(means[(1, 0)][0] - 0.9) < 0.03
    nde = means[(1, 0)] - means[(0, 0)]
    assert abs(nde[0] - 0.3) < 0.03 and abs(nde[1]) < 0.03


def test_influence_centered_and_effect_identity(observed):
    W, A, M, Y = observed
    res = estimate_target(W, A, M, Y, ATE, seed=2, extra_components=[(1, 0)])
    np.testing.assert_allclose(res.values.mean(0), 0, atol=1e-10)
    nde, nie = res.contrast(NDE), res.contrast(NIE)
    np.testing.assert_allclose(res.estimate, nde.estimate + nie.estimate, atol=1e-12)
    np.testing.assert_allclose(res.values, nde.values + nie.values, atol=1e-10)


def test_permutation_invariance(observed, rng):
    W, A, M, Y = observed
    ids = [f"s{i:03d}" for i in range(len(A))]
    perm = rng.permutation(len(A))
    a = estimate_target(W, A, M, Y, NDE, seed=4, ids=ids)
    b = estimate_target(W[perm], A[perm], M[perm], Y[perm], NDE, seed=4,
                        ids=[ids[i] for i in perm])
    np.testing.assert_array_equal(a.estimate, b.estimate)
    np.testing.assert_array_equal(a.values[perm], b.values)
    # without ids the canonical order comes from the row content
    c = estimate_target(W, A, M, Y, NDE, seed=4)
    d = estimate_target(W[perm], A[perm], M[perm], Y[perm], NDE, seed=4)
    np.testing.assert_array_equal(c.estimate, d.estimate)


def test_crossfit_no_leak(observed):
    # the model predicting fold k is trained without fold k, so changing the
    # fold-k data leaves those predictions bit-identical
    W, A, M, Y = observed
    n = len(A)
    plan = make_folds(n, 5, A, seed=0)
    k = 2
    te = plan.test_index(k)

    def fold_fits(Yv, Mv):
        return {j: fit_nuisances(W[plan.train_index(j)], A[plan.train_index(j)],
                                 Mv[plan.train_index(j)], Yv[plan.train_index(j)], seed=j)
                for j in range(plan.K)}

    base = crossfit_predictions(W, M, fold_fits(Y, M), plan, (0, 1))
    Y2, M2 = Y.copy(), M.copy()
    Y2[te] += 10.0
    M2[te] -= 3.0
    moved = crossfit_predictions(W, M, fold_fits(Y2, M2), plan, (0, 1))
    np.testing.assert_array_equal(base.p_treat_w[te], moved.p_treat_w[te])
    np.testing.assert_array_equal(base.p_treat_mw[te], moved.p_treat_mw[te])
    np.testing.assert_array_equal(base.outcome[1][te], moved.outcome[1][te])
    np.testing.assert_array_equal(base.seqreg[(1, 0)][te], moved.seqreg[(1, 0)][te])
    others = np.setdiff1d(np.arange(n), te)
    assert not np.array_equal(base.outcome[1][others], moved.outcome[1][others])


def test_estimate_target_linear_in_fold_outcomes(observed):
    # through the public path: shifting fold-k outcomes by d and 2d must move
    # the fold-k terms exactly linearly, which fails if nuisances saw fold k
    W, A, M, Y = observed
    ids = [f"s{i:03d}" for i in range(len(A))]
    plan = make_folds(len(A), 5, A, seed=6)
    te = plan.test_index(0)
    runs = []
    for d in (0.0, 1.0, 2.0):
        Yd = Y.copy()
        Yd[te] += d
        runs.append(estimate_target(W, A, M, Yd, "psi:1:0", seed=6, ids=ids).terms[(1, 0)])
    d1, d2 = runs[1][te] - runs[0][te], runs[2][te] - runs[0][te]
    np.testing.assert_allclose(d2, 2 * d1, atol=1e-9)


def test_missing_fold_model_raises(observed):
    W, A, M, Y = observed
    plan = make_folds(len(A), 5, A, seed=0)
    with pytest.raises(CrossFitContractError):
        aipw_component(1, 0, Y, A, W, M, {0: None}, plan)


def test_nuisance_fit_examples(rng):
    n = 2000
    W = rng.normal(size=(n, 3))
    M = rng.normal(size=n)
    A = (rng.random(n) < 0.5).astype(int)
    fits = fit_nuisances(W, A, M, np.full(n, 3.0), seed=0)
    pred = fits.predict(W[:50], M[:50], (0, 1))
    np.testing.assert_allclose(pred.outcome[1], 3.0, atol=1e-10)
    np.testing.assert_allclose(pred.seqreg[(1, 0)], 3.0, atol=1e-10)
    assert np.all(np.abs(pred.p_treat_w - 0.5) < 0.05) and np.all(np.abs(pred.p_treat_mw - 0.5) < 0.05)


def test_propensity_tracks_truth():
    sub = gen_subject_level(DgpConfig(n=1000, T=20, seed=12))
    fits = fit_nuisances(sub["W"], sub["A"], sub["M"], sub["Y"][:, :2], seed=0)
    p = fits.prop_w.predict(sub["W"])
    assert np.corrcoef(p, oracle_nuisances().p_treat_w(sub["W"]))[0, 1] > 0.9


def test_clip_fraction_small(observed):
    W, A, M, Y = observed
    assert estimate_target(W, A, M, Y, NDE, seed=0).clip_fraction < 0.01


def test_sklearn_front_end(observed):
    W, A, M, Y = observed
    est = MediationAIPW(target="nde", random_state=3)
    assert clone(est).get_params() == est.get_params()
    est.fit(W, A, M, Y)
    assert est.estimate_.shape == (2,) and est.influence_.shape == (len(A), 2)
    np.testing.assert_allclose(est.se_, np.sqrt((est.influence_**2).mean(0) / len(A)))
    with pytest.raises(KeyError):
        est.contrast("nie")  # the (1, 1) component was not estimated for an NDE fit
