"""Per-subject nuisance removal.

Design expansion (12p / 36p style), framewise displacement, scrubbing, and
residualisation of the V x T response against the nuisance series either by
OLS on an expanded design or by a stacked ensemble fit per region.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, TransformerMixin

from .data import DimensionError, SubjectRecord
from .learners import DEFAULT_INTRA_LIBRARY, LearnerSpec, block_folds, cv_stack

logger = logging.getLogger(__name__)

TOL_CENTER = 1e-8
PIVOT_TOL = 1e-10


class ResidualMethod(str, Enum):
    KNOWN_F = "known_f"
    LINEAR_12P = "linear_12p"
    LINEAR_12P_SCRUB = "linear_12p_scrub"
    ENSEMBLE_STACK = "ensemble_stack"


@dataclass(frozen=True)
class NuisanceDesign:
    columns: np.ndarray  # T x d, first column is the intercept
    labels: tuple[str, ...]

    @property
    def n_columns(self) -> int:
        return self.columns.shape[1]


@dataclass(frozen=True)
class ScrubResult:
    kept_indices: np.ndarray
    removed_fraction: float
    excluded: bool


@dataclass(frozen=True)
class ResidualSeries:
    values: np.ndarray  # V x T'
    method: ResidualMethod
    dropped_columns: tuple[str, ...] = ()
    weights: np.ndarray | None = None  # stack weights (L x V) for the ensemble path


def temporal_derivative(H) -> np.ndarray:
    """First differences along time with a leading zero (keeps length T)."""
    H = np.asarray(H, dtype=float)
    d = np.zeros_like(H)
    d[:, 1:] = np.diff(H, axis=1)
    return d


def _check_nuisance(H) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    if H.ndim != 2:
        raise DimensionError(f"nuisance must be p x T, got shape {H.shape}")
    if H.shape[1] < 2:
        raise DimensionError("need T >= 2 time points")
    return H


def expand_full(H) -> NuisanceDesign:
    """Intercept, p mains, p derivatives, then squares of mains and derivatives."""
    H = _check_nuisance(H)
    p, T = H.shape
    if p < 1:
        raise DimensionError("need at least one nuisance series")
    D = temporal_derivative(H)
    cols = np.vstack([np.ones((1, T)), H, D, H**2, D**2]).T
    labels = (
        ["intercept"]
        + [f"h{k + 1}" for k in range(p)]
        + [f"dh{k + 1}" for k in range(p)]
        + [f"h{k + 1}^2" for k in range(p)]
        + [f"dh{k + 1}^2" for k in range(p)]
    )
    return NuisanceDesign(cols, tuple(labels))


def expand_12p(H) -> NuisanceDesign:
    H = _check_nuisance(H)
    if H.shape[0] != 3:
        raise DimensionError(f"12p expansion needs p=3 motion series, got p={H.shape[0]}")
    return expand_full(H)


def ensemble_features(H) -> np.ndarray:
    """T x 2p matrix of main terms and their temporal derivatives."""
    H = _check_nuisance(H)
    return np.vstack([H, temporal_derivative(H)]).T


def framewise_displacement(H, mode: str = "abs_sum_sim") -> np.ndarray:
    H = np.asarray(H, dtype=float)
    if H.ndim != 2:
        raise DimensionError(f"nuisance must be p x T, got shape {H.shape}")
    if mode == "abs_sum_sim":
        if H.shape[0] < 3:
            raise DimensionError("abs_sum_sim needs at least 3 nuisance rows")
        return np.abs(H[:3]).sum(axis=0)
    if mode == "power_fd":
        return np.abs(temporal_derivative(H)).sum(axis=0)
    raise ValueError(f"unsupported framewise displacement mode {mode!r}")


def scrub(X, H, fd, threshold: float = 3.0, max_removed_frac: float = 0.35):
    """Drop time points with ``fd > threshold``; flag exclusion past the cap."""
    X = np.asarray(X, dtype=float)
    H = np.asarray(H, dtype=float)
    fd = np.asarray(fd, dtype=float)
    if fd.shape[0] != X.shape[1]:
        raise DimensionError("fd length must equal T")
    keep = np.flatnonzero(fd <= threshold)
    removed = 1.0 - keep.size / fd.size
    result = ScrubResult(keep, float(removed), bool(removed > max_removed_frac))
    return X[:, keep], H[:, keep], result


def _independent_columns(Z) -> np.ndarray:
    """Indices of a maximal independent column subset via pivoted QR."""
    _, R, piv = scipy.linalg.qr(Z, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        return np.array([0])
    rank = int(np.sum(diag > PIVOT_TOL * diag[0]))
    return np.sort(piv[:rank])


def linear_residuals(X, design: NuisanceDesign) -> ResidualSeries:
    """OLS residuals of every response row on the nuisance design.

    Linearly dependent design columns are dropped (with a warning) before
    fitting, so the residuals stay orthogonal to the full design.
    """
    X = np.asarray(X, dtype=float)
    Z = design.columns
    if X.shape[1] != Z.shape[0]:
        raise DimensionError("response and design disagree on T")
    keep = _independent_columns(Z)
    dropped = tuple(design.labels[i] for i in range(Z.shape[1]) if i not in set(keep))
    if dropped:
        warnings.warn(f"dropping linearly dependent nuisance columns {dropped}", RuntimeWarning)
    Zk = Z[:, keep]
    if Zk.shape[0] <= Zk.shape[1]:
        raise DimensionError(f"need T > d for OLS, got T={Zk.shape[0]}, d={Zk.shape[1]}")
    coef, *_ = np.linalg.lstsq(Zk, X.T, rcond=None)
    resid = X - (Zk @ coef).T
    return ResidualSeries(resid, ResidualMethod.LINEAR_12P, dropped)


def ensemble_residuals(
    X,
    features,
    library: Sequence[LearnerSpec] = DEFAULT_INTRA_LIBRARY,
    K: int = 5,
    seed: int = 0,
) -> ResidualSeries:
    """Residuals after a stacked-ensemble fit of each region on the features.

    CV folds are contiguous time blocks. Residuals use the in-sample stacked
    prediction. All regions share one set of candidate fits (each column gets
    its own coefficients and its own simplex weights).
    """
    X = np.asarray(X, dtype=float)
    F = np.asarray(features, dtype=float)
    T = X.shape[1]
    if F.shape[0] != T:
        raise DimensionError("features must be T x d")
    if T < 10 * K:
        raise DimensionError(f"need T >= 10K = {10 * K} time points, got {T}")
    sd = F.std(axis=0)
    live = sd > 1e-12 * max(1.0, float(np.abs(F).max(initial=0.0)))
    if not live.all():
        warnings.warn(f"dropping {int((~live).sum())} zero-variance feature(s)", RuntimeWarning)
        F = F[:, live]
    if F.shape[1] == 0:
        resid = X - X.mean(axis=1, keepdims=True)
        return ResidualSeries(resid, ResidualMethod.ENSEMBLE_STACK)
    stack = cv_stack(library, F, X.T, K=K, seed=seed, folds=block_folds(T, K))
    fitted = stack.predict(F)
    return ResidualSeries(X - fitted.T, ResidualMethod.ENSEMBLE_STACK, weights=stack.weights)


class IntraSubjectProcessor(BaseEstimator, TransformerMixin):
    """Turn a :class:`SubjectRecord` into residual series.

    The processing is intra-subject, so ``fit`` is a no-op and every call to
    :meth:`process` fits that subject's own nuisance model.

    Parameters
    ----------
    method : {'linear_12p', 'linear_12p_scrub', 'ensemble_stack', 'known_f'}
    fd_threshold, max_removed_frac : scrubbing rule for 'linear_12p_scrub'.
    fd_mode : framewise displacement definition used for scrubbing.
    library, n_folds : ensemble configuration.
    """

    def __init__(
        self,
        method="ensemble_stack",
        fd_threshold=3.0,
        max_removed_frac=0.35,
        fd_mode="abs_sum_sim",
        library=DEFAULT_INTRA_LIBRARY,
        n_folds=5,
        random_state=0,
    ):
        self.method = method
        self.fd_threshold = fd_threshold
        self.max_removed_frac = max_removed_frac
        self.fd_mode = fd_mode
        self.library = library
        self.n_folds = n_folds
        self.random_state = random_state

    def fit(self, X=None, y=None):
        ResidualMethod(self.method)
        return self

    def process(self, subject: SubjectRecord, known_f=None, seed: int | None = None):
        """Return ``(ResidualSeries, ScrubResult | None)`` for one subject.

        ``known_f`` (V x T or length-T) is required for the 'known_f' method.
        """
        method = ResidualMethod(self.method)
        X, H = subject.response, subject.nuisance
        seed = self.random_state if seed is None else seed
        if method is ResidualMethod.KNOWN_F:
            if known_f is None:
                raise ValueError("known_f method needs the true nuisance contribution")
            f = np.broadcast_to(np.asarray(known_f, float), X.shape)
            return ResidualSeries(X - f, method), None
        if method is ResidualMethod.LINEAR_12P:
            return linear_residuals(X, expand_12p(H)), None
        if method is ResidualMethod.LINEAR_12P_SCRUB:
            fd = framewise_displacement(H, self.fd_mode)
            Xs, Hs, info = scrub(X, H, fd, self.fd_threshold, self.max_removed_frac)
            if info.excluded:
                return None, info
            res = linear_residuals(Xs, expand_12p(Hs))
            return ResidualSeries(res.values, method, res.dropped_columns), info
        return (
            ensemble_residuals(X, ensemble_features(H), self.library, self.n_folds, seed),
            None,
        )

    def transform(self, subjects):
        return [self.process(s)[0] for s in subjects]
