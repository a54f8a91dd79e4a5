"""Candidate learners and cross-validated simplex stacking.

Every learner follows the scikit-learn estimator protocol (``fit`` returns
``self``, ``predict`` for regression, ``predict_proba`` style output for the
binary task is exposed through ``predict`` on the probability scale). The
linear-family learners accept a 2-D ``y`` and fit each column independently
in one factorisation, which is how the same design is reused across regions
(intra-subject) or across outcomes (inter-subject).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numba
import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

logger = logging.getLogger(__name__)

CLIP_EPS = 0.01
RIDGE_GRID = (0.01, 0.1, 1.0, 10.0)
SINGULAR_RIDGE = 1e-6

LEARNER_KINDS = ("mean", "linear", "ridge", "logistic", "interaction_linear", "bagged_tree")
TASKS = ("regression", "binary_prob")


class LearnerFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    hyperparams: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        allowed = {
            "mean": set(),
            "linear": set(),
            "ridge": {"lambdas", "n_folds"},
            "logistic": {"max_iter", "tol"},
            "interaction_linear": set(),
            "bagged_tree": {"n_estimators", "max_depth", "subsample", "min_samples_leaf"},
        }[self.kind]
        extra = set(self.hyperparams) - allowed
        if extra:
            raise ValueError(f"hyperparams {sorted(extra)} not valid for {self.kind}")

    @property
    def name(self) -> str:
        if not self.hyperparams:
            return self.kind
        args = ",".join(f"{k}={v}" for k, v in sorted(self.hyperparams.items()))
        return f"{self.kind}({args})"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hyperparams": dict(self.hyperparams)}

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerSpec":
        hp = dict(d.get("hyperparams", {}))
        if "lambdas" in hp:
            hp["lambdas"] = tuple(hp["lambdas"])
        return cls(d["kind"], hp)


def _lib(*kinds: str) -> tuple[LearnerSpec, ...]:
    return tuple(LearnerSpec(k) for k in kinds)


DEFAULT_REGRESSION_LIBRARY = _lib("mean", "linear", "ridge", "interaction_linear", "bagged_tree")
DEFAULT_PROPENSITY_LIBRARY = _lib("mean", "logistic", "interaction_linear", "bagged_tree")
DEFAULT_INTRA_LIBRARY = _lib("mean", "linear", "interaction_linear")


# --------------------------------------------------------------------------
# design helpers


def _as_2d_y(y):
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        return y[:, None], True
    if y.ndim != 2:
        raise ValueError(f"y must be 1-D or 2-D, got shape {y.shape}")
    return y, False


def _with_intercept(X):
    return np.column_stack([np.ones(X.shape[0]), X])


def interaction_features(X) -> np.ndarray:
    """Main terms, all pairwise products and squares (no intercept)."""
    X = np.asarray(X, dtype=float)
    d = X.shape[1]
    iu, ju = np.triu_indices(d)
    return np.column_stack([X, X[:, iu] * X[:, ju]])


def _lstsq(Z, Y):
    """Least squares with a tiny ridge when Z is numerically rank deficient."""
    coef, _, rank, _ = np.linalg.lstsq(Z, Y, rcond=None)
    if rank < Z.shape[1]:
        coef = _ridge_solve(Z, Y, SINGULAR_RIDGE)
    return coef


def _ridge_solve(Z, Y, lam):
    # intercept (column 0) unpenalised
    G = Z.T @ Z
    pen = np.full(Z.shape[1], lam)
    pen[0] = 0.0
    G[np.diag_indices_from(G)] += pen
    try:
        return np.linalg.solve(G, Z.T @ Y)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(G, Z.T @ Y, rcond=None)[0]


# --------------------------------------------------------------------------
# learners


class _Base(BaseEstimator, RegressorMixin):
    def _finish(self, pred):
        return pred[:, 0] if self._flat else pred


class MeanLearner(_Base):
    def fit(self, X, y):
        Y, self._flat = _as_2d_y(y)
        self.mean_ = Y.mean(axis=0)
        return self

    def predict(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X)
        return self._finish(np.tile(self.mean_, (X.shape[0], 1)))


class LinearLearner(_Base):
    """OLS with intercept; falls back to a ridge solve when ``m <= d``."""

    def fit(self, X, y):
        X = check_array(X)
        Y, self._flat = _as_2d_y(y)
        Z = _with_intercept(X)
        if Z.shape[0] <= Z.shape[1] - 1:
            self.coef_ = _ridge_solve(Z, Y, SINGULAR_RIDGE)
        else:
            self.coef_ = _lstsq(Z, Y)
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return self._finish(_with_intercept(check_array(X)) @ self.coef_)


class InteractionLinearLearner(_Base):
    """Linear fit on main terms, pairwise products and squares.

    With ``link='logit'`` the same expansion feeds an IRLS logistic fit.
    """

    def __init__(self, link="identity", clip_eps=CLIP_EPS):
        self.link = link
        self.clip_eps = clip_eps

    def fit(self, X, y):
        Xe = interaction_features(check_array(X))
        if self.link == "logit":
            self.model_ = LogisticIRLS(clip_eps=self.clip_eps, ridge=SINGULAR_RIDGE).fit(Xe, y)
            self._flat = True
        else:
            self.model_ = LinearLearner().fit(Xe, y)
            self._flat = self.model_._flat
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(interaction_features(check_array(X)))


class RidgeLearner(_Base):
    """Ridge on standardised features; penalty picked per output by internal CV."""

    def __init__(self, lambdas=RIDGE_GRID, n_folds=5):
        self.lambdas = lambdas
        self.n_folds = n_folds

    @staticmethod
    def _path(X, Y, lambdas):
        mu, sd = X.mean(axis=0), X.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        Xs = (X - mu) / sd
        ym = Y.mean(axis=0)
        U, s, Vt = np.linalg.svd(Xs, full_matrices=False)
        Uy = U.T @ (Y - ym)
        coefs = []
        for lam in lambdas:
            coef = Vt.T @ ((s / (s**2 + lam))[:, None] * Uy)
            coefs.append((mu, sd, ym, coef))
        return coefs

    @staticmethod
    def _apply(X, params):
        mu, sd, ym, coef = params
        return ((X - mu) / sd) @ coef + ym

    def fit(self, X, y):
        X = check_array(X)
        Y, self._flat = _as_2d_y(y)
        lambdas = tuple(float(v) for v in self.lambdas)
        m = X.shape[0]
        K = min(self.n_folds, m)
        fold = np.arange(m) % K
        err = np.zeros((len(lambdas), Y.shape[1]))
        for k in range(K):
            tr, te = fold != k, fold == k
            for li, params in enumerate(self._path(X[tr], Y[tr], lambdas)):
                err[li] += ((self._apply(X[te], params) - Y[te]) ** 2).sum(axis=0)
        self.best_lambda_ = np.array(lambdas)[np.argmin(err, axis=0)]
        full = self._path(X, Y, lambdas)
        best = np.argmin(err, axis=0)
        mu, sd, ym, _ = full[0]
        coef = np.column_stack([full[b][3][:, c] for c, b in enumerate(best)])
        self.params_ = (mu, sd, ym, coef)
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self._finish(self._apply(check_array(X), self.params_))


def _log_expit(lin_pred):
    # log(sigmoid(lin_pred)) computed stably
    return -np.logaddexp(0.0, -lin_pred)


def binomial_deviance(y, lin_pred) -> float:
    return float(-2.0 * np.sum(y * _log_expit(lin_pred) + (1 - y) * _log_expit(-lin_pred)))


class LogisticIRLS(_Base):
    """Logistic regression by iteratively reweighted least squares.

    Convergence uses the relative deviance change
    ``|dev_k - dev_{k-1}| / (|dev_k| + 0.1) < tol``. Step halving keeps the
    deviance path monotone. When ``max_iter`` is reached the last iterate is
    kept and ``converged_`` is False. ``predict`` returns P(y=1) clipped to
    ``[clip_eps, 1 - clip_eps]``.
    """

    def __init__(self, max_iter=100, tol=1e-8, clip_eps=CLIP_EPS, ridge=0.0):
        self.max_iter = max_iter
        self.tol = tol
        self.clip_eps = clip_eps
        self.ridge = ridge

    def fit(self, X, y):
        X = check_array(X)
        y = np.asarray(y, dtype=float).ravel()
        if not np.all((y == 0) | (y == 1)):
            raise LearnerFitError("logistic learner needs a 0/1 response")
        self._flat = True
        Z = _with_intercept(X)
        coef = np.zeros(Z.shape[1])
        dev = binomial_deviance(y, Z @ coef)
        path = [dev]
        self.converged_ = False
        pen = np.full(Z.shape[1], self.ridge)
        pen[0] = 0.0
        for it in range(self.max_iter):
            lin_pred = Z @ coef
            p = expit(lin_pred)
            w = np.maximum(p * (1 - p), 1e-10)
            grad = Z.T @ (y - p) - pen * coef
            H = (Z * w[:, None]).T @ Z
            H[np.diag_indices_from(H)] += pen
            try:
                step = np.linalg.solve(H, grad)
            except np.linalg.LinAlgError:
                H[np.diag_indices_from(H)] += SINGULAR_RIDGE
                step = np.linalg.lstsq(H, grad, rcond=None)[0]
            t = 1.0
            for _ in range(30):
                cand = coef + t * step
                new_dev = binomial_deviance(y, Z @ cand)
                if new_dev <= dev + 1e-12 * abs(dev):
                    break
                t *= 0.5
            else:
                cand, new_dev = coef, dev
            coef = cand
            path.append(new_dev)
            change = abs(dev - new_dev) / (abs(new_dev) + 0.1)
            dev = new_dev
            if change < self.tol:
                self.converged_ = True
                break
        self.n_iter_ = it + 1
        if not self.converged_:
            warnings.warn(
                f"IRLS did not converge in {self.max_iter} iterations", RuntimeWarning
            )
        self.coef_ = coef
        self.deviance_path_ = np.array(path)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return _with_intercept(check_array(X)) @ self.coef_

    def predict(self, X):
        p = expit(self.decision_function(X))
        return np.clip(p, self.clip_eps, 1 - self.clip_eps)


@numba.njit(cache=True)
def _grow_tree(X, y, max_depth, min_leaf, feat, thr, val):
    # heap layout: children of node i are 2i+1 and 2i+2; feat -1 = leaf, -2 = unused.
    # Grown level by level: one sorted sweep per feature scores every open node.
    m, d = X.shape
    order = np.empty((d, m), dtype=np.int64)
    for f in range(d):
        order[f] = np.argsort(X[:, f], kind="mergesort")
    node_of = np.zeros(m, dtype=np.int64)
    for depth in range(max_depth + 1):
        first = 2**depth - 1
        nl = 2**depth
        cnt = np.zeros(nl, dtype=np.int64)
        tot = np.zeros(nl)
        for i in range(m):
            k = node_of[i] - first
            if k >= 0:
                cnt[k] += 1
                tot[k] += y[i]
        for k in range(nl):
            if cnt[k] > 0:
                feat[first + k] = -1
                val[first + k] = tot[k] / cnt[k]
        if depth == max_depth:
            break
        base = np.zeros(nl)
        best_gain = np.zeros(nl)
        for k in range(nl):
            if cnt[k] > 0:
                base[k] = tot[k] * tot[k] / cnt[k]
            best_gain[k] = 1e-12 * (1.0 + abs(base[k]))
        best_f = np.full(nl, -1, dtype=np.int64)
        best_t = np.zeros(nl)
        for f in range(d):
            run_cnt = np.zeros(nl, dtype=np.int64)
            run_sum = np.zeros(nl)
            last_x = np.full(nl, -np.inf)
            for r in order[f]:
                k = node_of[r] - first
                if k < 0:
                    continue
                x = X[r, f]
                s = run_cnt[k]
                if s >= min_leaf and cnt[k] - s >= min_leaf and last_x[k] < x:
                    left = run_sum[k]
                    right = tot[k] - left
                    gain = left * left / s + right * right / (cnt[k] - s) - base[k]
                    if gain > best_gain[k]:
                        best_gain[k] = gain
                        best_f[k] = f
                        best_t[k] = 0.5 * (last_x[k] + x)
                run_cnt[k] = s + 1
                run_sum[k] += y[r]
                last_x[k] = x
        for k in range(nl):
            if best_f[k] >= 0:
                feat[first + k] = best_f[k]
                thr[first + k] = best_t[k]
        for i in range(m):
            node = node_of[i]
            k = node - first
            if k < 0:
                continue
            if best_f[k] < 0:
                node_of[i] = -1
            elif X[i, best_f[k]] <= best_t[k]:
                node_of[i] = 2 * node + 1
            else:
                node_of[i] = 2 * node + 2


@numba.njit(cache=True)
def _grow_forest(X, y, boot, max_depth, min_leaf):
    n_trees = boot.shape[0]
    n_nodes = 2 ** (max_depth + 1) - 1
    feat = np.full((n_trees, n_nodes), -2, dtype=np.int64)
    thr = np.zeros((n_trees, n_nodes))
    val = np.zeros((n_trees, n_nodes))
    for b in range(n_trees):
        rows = boot[b]
        _grow_tree(X[rows], y[rows], max_depth, min_leaf, feat[b], thr[b], val[b])
    return feat, thr, val


@numba.njit(cache=True)
def _predict_forest(X, feat, thr, val):
    m = X.shape[0]
    n_trees = feat.shape[0]
    out = np.zeros(m)
    for i in range(m):
        acc = 0.0
        for b in range(n_trees):
            node = 0
            while feat[b, node] >= 0:
                if X[i, feat[b, node]] <= thr[b, node]:
                    node = 2 * node + 1
                else:
                    node = 2 * node + 2
            acc += val[b, node]
        out[i] = acc / n_trees
    return out


class BaggedTreesLearner(_Base):
    """Bagged depth-limited CART regression trees (squared-error splits).

    Each bag is a with-replacement draw of ``subsample * m`` rows. Output
    columns are fit independently with their own bootstrap draws.
    """

    def __init__(
        self, n_estimators=50, max_depth=3, subsample=0.8, min_samples_leaf=5, random_state=0
    ):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.subsample = subsample
        self.min_samples_leaf = min_samples_leaf
        self.random_state = random_state

    def fit(self, X, y):
        X = np.ascontiguousarray(check_array(X), dtype=float)
        Y, self._flat = _as_2d_y(y)
        m = X.shape[0]
        size = max(2, int(round(self.subsample * m)))
        ss = np.random.SeedSequence(int(self.random_state))
        self.forests_ = []
        for c, child in enumerate(ss.spawn(Y.shape[1])):
            rng = np.random.default_rng(child)
            boot = rng.integers(0, m, size=(self.n_estimators, size))
            self.forests_.append(
                _grow_forest(X, np.ascontiguousarray(Y[:, c]), boot,
                             int(self.max_depth), int(self.min_samples_leaf))
            )
        return self

    def predict(self, X):
        check_is_fitted(self, "forests_")
        X = np.ascontiguousarray(check_array(X), dtype=float)
        pred = np.column_stack([_predict_forest(X, *forest) for forest in self.forests_])
        return self._finish(pred)


def make_learner(spec: LearnerSpec, task: str = "regression", seed: int = 0,
                 clip_eps: float = CLIP_EPS):
    hp = dict(spec.hyperparams)
    if spec.kind == "mean":
        return MeanLearner()
    if spec.kind == "linear":
        return LinearLearner()
    if spec.kind == "ridge":
        return RidgeLearner(**hp)
    if spec.kind == "logistic":
        return LogisticIRLS(clip_eps=clip_eps, **hp)
    if spec.kind == "interaction_linear":
        link = "logit" if task == "binary_prob" else "identity"
        return InteractionLinearLearner(link=link, clip_eps=clip_eps)
    if spec.kind == "bagged_tree":
        return BaggedTreesLearner(random_state=seed, **hp)
    raise ValueError(spec.kind)


def fit_learner(spec: LearnerSpec, X, y, task: str = "regression", seed: int = 0,
                clip_eps: float = CLIP_EPS):
    """Fit one candidate learner and return it."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    y_arr = np.asarray(y, dtype=float)
    if spec.kind == "logistic" and task != "binary_prob":
        raise LearnerFitError("logistic learner is only valid for the binary_prob task")
    if task == "binary_prob" and spec.kind in ("logistic", "interaction_linear") and y_arr.ndim != 1:
        raise LearnerFitError("binary_prob learners take a single 0/1 response")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        model = make_learner(spec, task, seed, clip_eps).fit(np.asarray(X, float), y_arr)
    if isinstance(model, LogisticIRLS) and not model.converged_:
        logger.debug("IRLS hit max_iter; keeping last iterate")
    return model


# --------------------------------------------------------------------------
# simplex-constrained least squares


@numba.njit(cache=True)
def _eg_kernel(G, c, yy, step, max_iter, tol):
    L = G.shape[0]
    w = np.full(L, 1.0 / L)
    Gw = G @ w
    obj = w @ Gw - 2.0 * (c @ w) + yy
    n_iter = 0
    for it in range(max_iter):
        grad = 2.0 * (Gw - c)
        g0 = grad.min()
        new = w * np.exp(-step * (grad - g0))
        new /= new.sum()
        Gn = G @ new
        new_obj = new @ Gn - 2.0 * (c @ new) + yy
        n_iter = it + 1
        if new_obj > obj:
            # numerical uphill step; stay monotone
            step *= 0.5
            continue
        delta = obj - new_obj
        w, Gw, obj = new, Gn, new_obj
        if delta < tol:
            break
    return w, obj, n_iter


def _objective(G, c, yy, w):
    return float(w @ G @ w - 2.0 * c @ w + yy)


def _support_solve(G, c, support):
    """Minimise the quadratic on the affine hull of ``support`` (sum w = 1)."""
    k = len(support)
    Gs = G[np.ix_(support, support)]
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = 2 * Gs
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    rhs = np.concatenate([2 * c[support], [1.0]])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return None
    return sol[:k]


def _active_set_polish(G, c, w0, max_iter: int = 100):
    """Primal active-set refinement of a feasible start ``w0``.

    Returns the exact minimiser over the simplex, or None if a face system is
    singular.
    """
    L = len(w0)
    x = np.where(w0 > 1e-6, w0, 0.0)
    x /= x.sum()
    support = list(np.flatnonzero(x > 0))
    for _ in range(max_iter):
        ws = _support_solve(G, c, np.array(support))
        if ws is None:
            return None
        xs = x[support]
        if np.all(ws >= 0):
            x = np.zeros(L)
            x[support] = ws
            grad = 2 * (G @ x - c)
            lam = grad[support].mean()
            outside = np.setdiff1d(np.arange(L), support)
            if outside.size == 0:
                return x
            j = outside[np.argmin(grad[outside])]
            if grad[j] >= lam - 1e-10 * max(1.0, abs(lam)):
                return x
            support = sorted(support + [int(j)])
            continue
        # move toward ws until the first weight hits zero, then drop it
        shrink = ws < xs
        ratios = xs[shrink] / (xs[shrink] - ws[shrink])
        step = min(1.0, float(ratios.min()))
        xs = xs + step * (ws - xs)
        drop = np.flatnonzero(shrink)[np.argmin(ratios)]
        x = np.zeros(L)
        x[support] = np.clip(xs, 0.0, None)
        x[support[drop]] = 0.0
        x /= x.sum()
        support = [k for k in support if x[k] > 0]
    return None


def solve_simplex_ls(P, y, max_iter: int = 5000, tol: float = 1e-12) -> np.ndarray:
    """Weights on the probability simplex minimising ``||P w - y||^2``.

    Exponentiated-gradient descent from the uniform point with step
    ``0.5 / ||P'P||_2``. The EG iterate is refined by a primal active-set pass
    and compared against every vertex, and the best feasible candidate is
    returned (EG only approaches faces asymptotically).
    """
    P = np.asarray(P, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    L = P.shape[1]
    if L == 1:
        return np.ones(1)
    G = P.T @ P
    c = P.T @ y
    yy = float(y @ y)
    norm = np.linalg.norm(G, 2)
    step = 0.5 / norm if norm > 0 else 1.0
    w, _, _ = _eg_kernel(G, c, yy, step, max_iter, tol)
    w = np.asarray(w)
    best, best_obj = w, _objective(G, c, yy, w)
    candidates = [np.eye(L)[l] for l in range(L)]
    polished = _active_set_polish(G, c, w)
    if polished is not None:
        candidates.append(polished)
    for cand in candidates:
        obj = _objective(G, c, yy, cand)
        if obj < best_obj - 1e-14 * max(1.0, abs(best_obj)):
            best, best_obj = cand, obj
    best = np.clip(best, 0.0, None)
    return best / best.sum()


def simplex_kkt_gap(P, y, w) -> float:
    """Largest gradient excess over the minimum gradient among active weights."""
    P = np.asarray(P, float)
    grad = 2 * P.T @ (P @ w - np.asarray(y, float).ravel())
    active = w > 1e-6
    return float(np.max(grad[active] - grad.min()))


# --------------------------------------------------------------------------
# stacking


def random_folds(m: int, K: int, seed: int) -> np.ndarray:
    """Fold labels 0..K-1 with sizes differing by at most one."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    labels = np.arange(m) % K
    return labels[rng.permutation(m)]


def block_folds(m: int, K: int) -> np.ndarray:
    """Contiguous time blocks, sizes differing by at most one."""
    return np.repeat(np.arange(K), [len(b) for b in np.array_split(np.arange(m), K)])


@dataclass
class StackedModel:
    """Fitted learners and their simplex weights.

    ``weights`` is ``(L,)`` for a single response and ``(L, k)`` when k
    response columns were stacked together (one weight vector per column).
    """

    specs: tuple[LearnerSpec, ...]
    fitted_learners: list[Any]
    weights: np.ndarray
    task: str
    cv_risk: Any
    learner_cv_risk: np.ndarray
    clip_eps: float = CLIP_EPS
    multi_output: bool = False

    def learner_predictions(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        preds = []
        for model, w in zip(self.fitted_learners, self._weight_rows()):
            if model is None or not np.any(w > 0):
                preds.append(np.zeros((X.shape[0], self._k)))
                continue
            p = np.asarray(model.predict(X), dtype=float)
            preds.append(p.reshape(X.shape[0], -1))
        return np.stack(preds, axis=1)  # (m, L, k)

    @property
    def _k(self):
        return self.weights.shape[1] if self.weights.ndim == 2 else 1

    def _weight_rows(self):
        return self.weights if self.weights.ndim == 2 else self.weights[:, None]

    def predict(self, X) -> np.ndarray:
        P = self.learner_predictions(X)
        out = np.einsum("mlk,lk->mk", P, self._weight_rows())
        if self.task == "binary_prob":
            out = np.clip(out, self.clip_eps, 1 - self.clip_eps)
        return out if self.multi_output else out[:, 0]


def cv_stack(
    library: Sequence[LearnerSpec],
    X,
    y,
    K: int = 5,
    seed: int = 0,
    task: str = "regression",
    folds: np.ndarray | None = None,
    clip_eps: float = CLIP_EPS,
) -> StackedModel:
    """Cross-validated stacking over the simplex (squared-error risk).

    ``folds`` overrides the random fold assignment (e.g. contiguous time
    blocks). A learner that raises on any fold or on the full refit gets
    weight zero for every output column.
    """
    library = tuple(library)
    if not library:
        raise ValueError("empty learner library")
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    X = np.asarray(X, dtype=float)
    Y, flat = _as_2d_y(y)
    m, k = Y.shape
    if K < 2:
        raise ValueError("need K >= 2 folds")
    if m < 2 * K:
        raise ValueError(f"need at least 2K={2 * K} rows, got {m}")
    if folds is None:
        folds = random_folds(m, K, seed)
    folds = np.asarray(folds)
    L = len(library)
    y_fit = Y[:, 0] if flat else Y
    oof = np.full((m, L, k), np.nan)
    ok = np.ones(L, dtype=bool)
    for li, spec in enumerate(library):
        for f in np.unique(folds):
            tr, te = folds != f, folds == f
            try:
                model = fit_learner(spec, X[tr], y_fit[tr], task, seed + 1000 * int(f) + li, clip_eps)
                pred = np.asarray(model.predict(X[te]), dtype=float).reshape(te.sum(), -1)
            except Exception as exc:  # noqa: BLE001 - any learner failure zeroes its weight
                logger.warning("learner %s failed on fold %s: %s", spec.name, f, exc)
                ok[li] = False
                break
            if not np.all(np.isfinite(pred)):
                ok[li] = False
                break
            oof[te, li, :] = pred
    fitted: list[Any] = [None] * L
    for li, spec in enumerate(library):
        if not ok[li]:
            continue
        try:
            fitted[li] = fit_learner(spec, X, y_fit, task, seed + 7919 + li, clip_eps)
        except Exception as exc:  # noqa: BLE001
            logger.warning("learner %s failed on full refit: %s", spec.name, exc)
            ok[li] = False
    if not ok.any():
        raise LearnerFitError("every learner in the library failed")
    if task == "binary_prob":
        oof = np.clip(oof, clip_eps, 1 - clip_eps)
    learner_risk = np.full((L, k), np.inf)
    learner_risk[ok] = np.mean((oof[:, ok, :] - Y[:, None, :]) ** 2, axis=0)
    weights = np.zeros((L, k))
    risk = np.zeros(k)
    idx = np.flatnonzero(ok)
    for col in range(k):
        P = oof[:, idx, col]
        w = solve_simplex_ls(P, Y[:, col])
        weights[idx, col] = w
        risk[col] = np.mean((P @ w - Y[:, col]) ** 2)
    if flat:
        return StackedModel(library, fitted, weights[:, 0], task, float(risk[0]),
                            learner_risk[:, 0], clip_eps, False)
    return StackedModel(library, fitted, weights, task, risk, learner_risk, clip_eps, True)


class SuperLearner(BaseEstimator, RegressorMixin):
    """scikit-learn wrapper around :func:`cv_stack`."""

    def __init__(self, library=DEFAULT_REGRESSION_LIBRARY, n_folds=5, task="regression",
                 clip_eps=CLIP_EPS, random_state=0):
        self.library = library
        self.n_folds = n_folds
        self.task = task
        self.clip_eps = clip_eps
        self.random_state = random_state

    def fit(self, X, y, folds=None):
        self.stack_ = cv_stack(self.library, X, y, self.n_folds, self.random_state,
                               self.task, folds, self.clip_eps)
        self.weights_ = self.stack_.weights
        return self

    def predict(self, X):
        check_is_fitted(self, "stack_")
        return self.stack_.predict(X)
