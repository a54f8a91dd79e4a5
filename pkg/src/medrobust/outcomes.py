"""Subject-level derived outcomes computed from residual series."""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .data import DerivedOutcomeMatrix, OutcomeKind, pair_index

logger = logging.getLogger(__name__)

CLAMP_EPS = 1e-7


class DegenerateSeriesError(ValueError):
    """A residual row has zero variance, so its correlations are undefined."""


def pearson_corr(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D of equal length")
    if x.size < 3:
        raise ValueError("need at least 3 time points")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx, syy = xc @ xc, yc @ yc
    if sxx <= 0 or syy <= 0:
        raise DegenerateSeriesError("zero-variance series")
    return float(np.clip((xc @ yc) / np.sqrt(sxx * syy), -1.0, 1.0))


def fisher_z(r, clamp_eps: float = CLAMP_EPS):
    """``atanh`` of the correlation clamped to ``[-1 + eps, 1 - eps]``."""
    r = np.clip(np.asarray(r, dtype=float), -1.0 + clamp_eps, 1.0 - clamp_eps)
    out = np.arctanh(r)
    return float(out) if out.ndim == 0 else out


def correlation_matrix(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape[1] < 3:
        raise ValueError("need at least 3 time points")
    Rc = R - R.mean(axis=1, keepdims=True)
    ss = np.einsum("vt,vt->v", Rc, Rc)
    if np.any(ss <= 0):
        raise DegenerateSeriesError(f"zero-variance residual rows {np.flatnonzero(ss <= 0).tolist()}")
    C = (Rc @ Rc.T) / np.sqrt(np.outer(ss, ss))
    return np.clip(C, -1.0, 1.0)


def _upper(M) -> np.ndarray:
    iu, ju = np.triu_indices(M.shape[0], k=1)
    return M[iu, ju]


def derive_fc(residuals, clamp_eps: float = CLAMP_EPS) -> np.ndarray:
    """Fisher-z correlations for every region pair, in pair-index order."""
    R = getattr(residuals, "values", residuals)
    return fisher_z(_upper(correlation_matrix(R)), clamp_eps)


def derive_cross_products(residuals) -> np.ndarray:
    """Time-averaged products of residual rows, in pair-index order."""
    R = np.asarray(getattr(residuals, "values", residuals), dtype=float)
    return _upper(R @ R.T / R.shape[1])


class DerivedOutcomeTransformer(BaseEstimator, TransformerMixin):
    """Map a list of residual series (``None`` = excluded) to an outcome matrix.

    Subjects whose residuals are missing or degenerate are dropped; the
    returned boolean mask (``usable_``) records which inputs survived.
    """

    def __init__(self, kind="fisher_z_corr", clamp_eps=CLAMP_EPS):
        self.kind = kind
        self.clamp_eps = clamp_eps

    def fit(self, X=None, y=None):
        OutcomeKind(self.kind)
        return self

    def transform(self, residuals, ids=None) -> DerivedOutcomeMatrix:
        kind = OutcomeKind(self.kind)
        rows, usable = [], []
        V = None
        for res in residuals:
            if res is None:
                usable.append(False)
                continue
            try:
                if kind is OutcomeKind.FISHER_Z_CORR:
                    row = derive_fc(res, self.clamp_eps)
                else:
                    row = derive_cross_products(res)
            except DegenerateSeriesError:
                usable.append(False)
                continue
            V = np.asarray(getattr(res, "values", res)).shape[0]
            rows.append(row)
            usable.append(True)
        self.usable_ = np.array(usable, dtype=bool)
        n_bad = int((~self.usable_).sum())
        if n_bad:
            logger.info("dropped %d unusable subject(s) while deriving outcomes", n_bad)
        if V is None:
            raise ValueError("no usable subjects")
        kept_ids = () if ids is None else tuple(np.asarray(ids, dtype=object)[self.usable_])
        return DerivedOutcomeMatrix(np.vstack(rows), pair_index(V), kind, kept_ids)
