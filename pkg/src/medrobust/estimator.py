"""Cross-fitted multiply robust estimation of mediation contrasts.

The counterfactual mean ``E[Y(a, M(a'))]`` is estimated for
every outcome column at once. The mediator density ratio is replaced by a
ratio of two propensity scores (Bayes' rule), and the mediator integral by a
sequential regression: regress the fitted outcome model, evaluated at
``A = a``, on ``(A, W)`` and evaluate at ``A = a'``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .learners import (
    CLIP_EPS,
    DEFAULT_PROPENSITY_LIBRARY,
    DEFAULT_REGRESSION_LIBRARY,
    LearnerSpec,
    StackedModel,
    cv_stack,
)
from .simulation import stream

logger = logging.getLogger(__name__)


class CrossFitContractError(RuntimeError):
    """A subject would be scored by a nuisance model that saw it (or none)."""


class NuisanceFitError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# targets


@dataclass(frozen=True)
class CausalTarget:
    """One counterfactual mean ``E[Y(a, M(a'))]`` or an NDE / NIE / ATE contrast."""

    kind: str
    a: int | None = None
    a_prime: int | None = None

    _CONTRASTS = {
        "nde": (((1, 0), 1.0), ((0, 0), -1.0)),
        "nie": (((1, 1), 1.0), ((1, 0), -1.0)),
        "ate": (((1, 1), 1.0), ((0, 0), -1.0)),
    }

    def __post_init__(self):
        if self.kind == "mean":
            if self.a not in (0, 1) or self.a_prime not in (0, 1):
                raise ValueError("counterfactual-mean target needs a, a' in {0, 1}")
        elif self.kind not in self._CONTRASTS:
            raise ValueError(f"unknown target {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "CausalTarget":
        text = text.strip().lower()
        if text.startswith("psi"):
            parts = text.split(":")
            if len(parts) != 3:
                raise ValueError(f"psi target must look like psi:a:a', got {text!r}")
            return cls("mean", int(parts[1]), int(parts[2]))
        return cls(text)

    @property
    def components(self) -> tuple[tuple[tuple[int, int], float], ...]:
        if self.kind == "mean":
            return (((self.a, self.a_prime), 1.0),)
        return self._CONTRASTS[self.kind]

    @property
    def label(self) -> str:
        return f"psi:{self.a}:{self.a_prime}" if self.kind == "mean" else self.kind


NDE = CausalTarget("nde")
NIE = CausalTarget("nie")
ATE = CausalTarget("ate")


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class CrossFitPlan:
    K: int
    fold_of: np.ndarray
    seed: int
    requested_K: int

    def test_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def train_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)


def make_folds(n: int, K: int, treatment, seed: int) -> CrossFitPlan:
    """Treatment-stratified folds with near-equal sizes.

    Each arm is shuffled and dealt round-robin; the treated arm continues
    the rotation where the control arm stopped, so overall fold sizes also
    differ by at most one. ``K`` is reduced (with a warning) when an arm has
    fewer than ``K`` members.
    """
    A = np.asarray(treatment).astype(int)
    if A.shape[0] != n:
        raise ValueError("treatment length must equal n")
    arms = [np.flatnonzero(A == 0), np.flatnonzero(A == 1)]
    if min(len(a) for a in arms) == 0:
        raise ValueError("both treatment arms must be non-empty")
    requested = K
    smallest = min(len(a) for a in arms)
    if smallest < K:
        K = max(2, smallest)
        warnings.warn(f"reducing cross-fitting folds from {requested} to {K}", RuntimeWarning)
        if smallest < 2:
            raise ValueError("each arm needs at least 2 subjects for cross-fitting")
    if n < 2 * K:
        raise ValueError(f"need n >= 2K, got n={n}, K={K}")
    rng = stream(seed, 0xF01D)
    fold_of = np.empty(n, dtype=int)
    offset = 0
    for idx in arms:
        perm = idx[rng.permutation(len(idx))]
        fold_of[perm] = (offset + np.arange(len(idx))) % K
        offset = (offset + len(idx)) % K
    return CrossFitPlan(K, fold_of, seed, requested)


# --------------------------------------------------------------------------
# nuisance models


@dataclass
class NuisanceFits:
    prop_w: StackedModel
    prop_mw: StackedModel
    outcome_model: StackedModel
    seqreg_models: dict[int, StackedModel]
    clip_eps: float = CLIP_EPS

    def predict(self, W, M, a_values: Sequence[int]) -> "NuisancePredictions":
        W = np.asarray(W, float)
        M = np.asarray(M, float)
        n = W.shape[0]
        p_treat_w = self.prop_w.predict(W)
        p_treat_mw = self.prop_mw.predict(np.column_stack([M, W]))
        outcome, seqreg = {}, {}
        for a in a_values:
            outcome[a] = _as_cols(self.outcome_model.predict(np.column_stack([np.full(n, a), M, W])))
            for ap in (0, 1):
                seqreg[(a, ap)] = _as_cols(
                    self.seqreg_models[a].predict(np.column_stack([np.full(n, ap), W]))
                )
        return NuisancePredictions(p_treat_w, p_treat_mw, outcome, seqreg)

    def cv_risks(self) -> dict:
        return {
            "prop_w": float(self.prop_w.cv_risk),
            "prop_mw": float(self.prop_mw.cv_risk),
            "outcome": np.atleast_1d(self.outcome_model.cv_risk).tolist(),
            **{f"seqreg_a{a}": np.atleast_1d(m.cv_risk).tolist() for a, m in self.seqreg_models.items()},
        }


def _as_cols(x) -> np.ndarray:
    x = np.asarray(x, float)
    return x[:, None] if x.ndim == 1 else x


@dataclass
class NuisancePredictions:
    """Nuisance values at a set of subjects: P(A=1|W), P(A=1|M,W) and both regressions.

    ``outcome[a]`` is the outcome regression at ``(a, M_i, W_i)`` and ``seqreg[(a, a')]`` is
    ``xi_{a a' j}(W_i)``, both n x J.
    """

    p_treat_w: np.ndarray
    p_treat_mw: np.ndarray
    outcome: dict
    seqreg: dict


def fit_nuisances(
    W,
    A,
    M,
    Y,
    regression_library: Sequence[LearnerSpec] = DEFAULT_REGRESSION_LIBRARY,
    propensity_library: Sequence[LearnerSpec] = DEFAULT_PROPENSITY_LIBRARY,
    a_values: Sequence[int] = (0, 1),
    K: int = 5,
    seed: int = 0,
    clip_eps: float = CLIP_EPS,
) -> NuisanceFits:
    """Fit the propensities, the outcome regression and the sequential regressions.

    The outcome model regresses every outcome column on ``(A, M, W)``; the
    sequential regression for each ``a`` regresses the outcome regression at ``(a, M_i, W_i)`` for all
    training subjects on ``(A, W)``.
    """
    W = np.asarray(W, float)
    A = np.asarray(A).astype(float)
    M = np.asarray(M, float)
    Y = _as_cols(Y)
    n = W.shape[0]
    if not (np.any(A == 0) and np.any(A == 1)):
        raise NuisanceFitError("training split must contain both treatment arms")
    if not np.all(np.isfinite(Y)):
        raise NuisanceFitError("training outcomes must be finite")

    def _stack(name, lib, X, y, task, offset):
        try:
            return cv_stack(lib, X, y, K, seed + offset, task, clip_eps=clip_eps)
        except Exception as exc:
            raise NuisanceFitError(f"{name} fit failed: {exc}") from exc

    prop_w = _stack("prop_w", propensity_library, W, A, "binary_prob", 11)
    prop_mw = _stack("prop_mw", propensity_library, np.column_stack([M, W]), A, "binary_prob", 23)
    outcome = _stack("outcome", regression_library, np.column_stack([A, M, W]), Y, "regression", 37)
    seqreg = {}
    AW = np.column_stack([A, W])
    for a in a_values:
        pseudo = outcome.predict(np.column_stack([np.full(n, float(a)), M, W]))
        seqreg[a] = _stack(f"seqreg(a={a})", regression_library, AW, pseudo, "regression", 51 + a)
    return NuisanceFits(prop_w, prop_mw, outcome, seqreg, clip_eps)


# --------------------------------------------------------------------------
# AIPW


def _class_prob(p_treat, a, clip_eps):
    p = p_treat if a == 1 else 1.0 - p_treat
    return np.clip(p, clip_eps, 1 - clip_eps)


def aipw_terms(a, a_prime, Y, A, p_treat_w, p_treat_mw, outcome_a, seqreg, clip_eps: float = CLIP_EPS):
    """Uncentered per-subject AIPW terms for ``E[Y(a, M(a'))]`` (n x J).

    Propensity factors are clipped one by one before the density ratio
    ``pi(a'|M,W) pi(a|W) / (pi(a|M,W) pi(a'|W))`` is formed.
    """
    Y = _as_cols(Y)
    A = np.asarray(A).astype(int)
    p_treat_w = np.asarray(p_treat_w, float)
    p_treat_mw = np.asarray(p_treat_mw, float)
    outcome_a = _as_cols(outcome_a)
    seqreg = _as_cols(seqreg)
    pa_w = _class_prob(p_treat_w, a, clip_eps)
    pap_w = _class_prob(p_treat_w, a_prime, clip_eps)
    pa_mw = _class_prob(p_treat_mw, a, clip_eps)
    pap_mw = _class_prob(p_treat_mw, a_prime, clip_eps)
    ratio = (pap_mw * pa_w) / (pa_mw * pap_w)
    w1 = (A == a) / pa_w * ratio
    w2 = (A == a_prime) / pap_w
    return w1[:, None] * (Y - outcome_a) + w2[:, None] * (outcome_a - seqreg) + seqreg


def clip_fraction(p_treat_w, p_treat_mw, clip_eps: float = CLIP_EPS) -> float:
    p = np.concatenate([np.ravel(p_treat_w), np.ravel(p_treat_mw)])
    return float(np.mean((p <= clip_eps) | (p >= 1 - clip_eps)))


def crossfit_predictions(W, M, fits_per_fold, plan: CrossFitPlan, a_values) -> NuisancePredictions:
    """Assemble out-of-fold nuisance predictions for every subject."""
    W = np.asarray(W, float)
    M = np.asarray(M, float)
    n = W.shape[0]
    p_treat_w = np.full(n, np.nan)
    p_treat_mw = np.full(n, np.nan)
    outcome, seqreg = {}, {}
    for k in range(plan.K):
        if k not in fits_per_fold or fits_per_fold[k] is None:
            raise CrossFitContractError(f"no nuisance model for fold {k}")
        te = plan.test_index(k)
        pred = fits_per_fold[k].predict(W[te], M[te], a_values)
        p_treat_w[te] = pred.p_treat_w
        p_treat_mw[te] = pred.p_treat_mw
        for key, val in pred.outcome.items():
            outcome.setdefault(key, np.full((n, val.shape[1]), np.nan))[te] = val
        for key, val in pred.seqreg.items():
            seqreg.setdefault(key, np.full((n, val.shape[1]), np.nan))[te] = val
    return NuisancePredictions(p_treat_w, p_treat_mw, outcome, seqreg)


def aipw_component(a, a_prime, Y, A, W, M, fits_per_fold, plan: CrossFitPlan,
             clip_eps: float = CLIP_EPS):
    """Cross-fitted ``E[Y(a, M(a'))]`` and its uncentered influence terms."""
    pred = crossfit_predictions(W, M, fits_per_fold, plan, (a,))
    terms = aipw_terms(a, a_prime, Y, A, pred.p_treat_w, pred.p_treat_mw, pred.outcome[a],
                       pred.seqreg[(a, a_prime)], clip_eps)
    return terms.mean(axis=0), terms


@dataclass
class InfluenceMatrix:
    """Centered per-subject influence values for one target (n x J)."""

    values: np.ndarray
    target: CausalTarget
    estimate: np.ndarray
    component_means: dict
    terms: dict = field(repr=False, default_factory=dict)
    effective_K: int = 5
    clip_fraction: float = 0.0
    nuisance_risks: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def contrast(self, target: CausalTarget) -> "InfluenceMatrix":
        """Re-use the stored component means for another target."""
        return combine_components(target, self.component_means, self.terms,
                                  self.effective_K, self.clip_fraction, self.nuisance_risks)


def combine_components(target, component_means, terms, effective_K=5, clip_frac=0.0,
                       risks=None) -> InfluenceMatrix:
    est = 0.0
    raw = 0.0
    for key, sign in target.components:
        if key not in terms:
            raise KeyError(f"component {key} was not estimated")
        est = est + sign * component_means[key]
        raw = raw + sign * terms[key]
    est = np.asarray(est, float)
    infl = raw - est
    return InfluenceMatrix(infl, target, est, dict(component_means), dict(terms),
                           effective_K, clip_frac, list(risks or []))


def _canonical_order(ids, arrays) -> np.ndarray:
    if ids is not None:
        keys = np.asarray([str(i) for i in ids])
        if len(set(keys.tolist())) == len(keys):
            return np.argsort(keys, kind="stable")
    cols = np.column_stack([np.asarray(x, float).reshape(len(arrays[0]), -1) for x in arrays])
    return np.lexsort(cols.T[::-1])


def estimate_target(
    W,
    A,
    M,
    Y,
    target: CausalTarget | str = NDE,
    regression_library: Sequence[LearnerSpec] = DEFAULT_REGRESSION_LIBRARY,
    propensity_library: Sequence[LearnerSpec] = DEFAULT_PROPENSITY_LIBRARY,
    K: int = 5,
    seed: int = 0,
    clip_eps: float = CLIP_EPS,
    ids=None,
    extra_components: Sequence[tuple[int, int]] = (),
) -> InfluenceMatrix:
    """Cross-fitted AIPW point estimates and centered influence values.

    Subjects are processed in a canonical order (by ``ids`` when given,
    otherwise by row content) so the result does not depend on input order;
    influence rows are returned in the caller's order.
    """
    if isinstance(target, str):
        target = CausalTarget.parse(target)
    W = np.asarray(W, float)
    if W.ndim == 1:
        W = W[:, None]
    A = np.asarray(A).astype(int)
    M = np.asarray(M, float)
    Y = _as_cols(Y)
    n = W.shape[0]
    order = _canonical_order(ids, [A, M, W, Y])
    inv = np.empty(n, dtype=int)
    inv[order] = np.arange(n)
    Wc, Ac, Mc, Yc = W[order], A[order], M[order], Y[order]

    needed = {key for key, _ in target.components} | set(extra_components)
    a_values = sorted({a for a, _ in needed})
    plan = make_folds(n, K, Ac, seed)
    fits = {}
    for k in range(plan.K):
        tr = plan.train_index(k)
        fits[k] = fit_nuisances(Wc[tr], Ac[tr], Mc[tr], Yc[tr], regression_library,
                                propensity_library, a_values, 5, seed + 1009 * (k + 1),
                                clip_eps)
    pred = crossfit_predictions(Wc, Mc, fits, plan, a_values)
    terms, means = {}, {}
    for a, ap in sorted(needed):
        t = aipw_terms(a, ap, Yc, Ac, pred.p_treat_w, pred.p_treat_mw, pred.outcome[a], pred.seqreg[(a, ap)], clip_eps)
        means[(a, ap)] = t.mean(axis=0)
        terms[(a, ap)] = t[inv]
    frac = clip_fraction(pred.p_treat_w, pred.p_treat_mw, clip_eps)
    if frac > 0:
        logger.info("%.2f%% of propensity evaluations hit the clip", 100 * frac)
    risks = [fits[k].cv_risks() for k in range(plan.K)]
    return combine_components(target, means, terms, plan.K, frac, risks)


class MediationAIPW(BaseEstimator):
    """scikit-learn style front end for :func:`estimate_target`.

    ``fit(W, A, M, Y)`` sets ``estimate_`` (J,), ``influence_`` (n x J),
    ``se_`` and ``result_`` (the full :class:`InfluenceMatrix`).
    """

    def __init__(
        self,
        target="nde",
        n_folds=5,
        regression_library=DEFAULT_REGRESSION_LIBRARY,
        propensity_library=DEFAULT_PROPENSITY_LIBRARY,
        clip_eps=CLIP_EPS,
        random_state=0,
    ):
        self.target = target
        self.n_folds = n_folds
        self.regression_library = regression_library
        self.propensity_library = propensity_library
        self.clip_eps = clip_eps
        self.random_state = random_state

    def fit(self, W, A, M, Y, ids=None):
        target = CausalTarget.parse(self.target) if isinstance(self.target, str) else self.target
        self.result_ = estimate_target(
            W, A, M, Y, target, self.regression_library, self.propensity_library,
            self.n_folds, self.random_state, self.clip_eps, ids,
        )
        self.estimate_ = self.result_.estimate
        self.influence_ = self.result_.values
        n = self.influence_.shape[0]
        self.se_ = np.sqrt(np.mean(self.influence_**2, axis=0) / n)
        self.effective_n_folds_ = self.result_.effective_K
        return self

    def contrast(self, target):
        target = CausalTarget.parse(target) if isinstance(target, str) else target
        return self.result_.contrast(target)
