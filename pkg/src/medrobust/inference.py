"""Influence-based inference: variances, tests, simultaneous intervals, FDPex."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .simulation import stream

C0_DEFAULT = 1e-6
_CHUNK = 256


class EmptyInformativeSetError(ValueError):
    """No outcome passed the variance screen, so no inference is possible."""


@dataclass(frozen=True)
class FdpConfig:
    c: float = 0.1
    alpha: float = 0.1
    c0: float = C0_DEFAULT
    B: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.c < 1:
            raise ValueError("c must lie in (0, 1)")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.c0 < 0:
            raise ValueError("c0 must be >= 0")
        if int(self.B) != self.B or self.B < 200:
            raise ValueError("B must be an integer >= 200")


def _influence_and_estimate(infl, estimate=None):
    values = getattr(infl, "values", infl)
    if estimate is None:
        estimate = getattr(infl, "estimate")
    infl = np.asarray(values, float)
    if infl.ndim == 1:
        infl = infl[:, None]
    return infl, np.atleast_1d(np.asarray(estimate, float))


def variance_and_t(infl, estimate=None):
    """Return ``(variance, t)`` with ``t = sqrt(n) estimate / sd``; NaN where sd is 0."""
    infl, estimate = _influence_and_estimate(infl, estimate)
    n = infl.shape[0]
    if n < 2:
        raise ValueError("need n >= 2")
    variance = np.mean(infl**2, axis=0)
    sd = np.sqrt(variance)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(sd > 0, math.sqrt(n) * estimate / np.where(sd > 0, sd, 1.0), np.nan)
    return variance, t


def pointwise_ci(estimate, variance, n, alpha=0.05):
    half = norm.ppf(1 - alpha / 2) * np.sqrt(variance) / math.sqrt(n)
    return estimate - half, estimate + half


def screen_informative(variance, c0: float = C0_DEFAULT) -> np.ndarray:
    """Indices (0-based) with ``variance >= c0``."""
    variance = np.asarray(variance, float)
    keep = np.flatnonzero(np.nan_to_num(variance, nan=-1.0) >= c0)
    if keep.size == 0:
        raise EmptyInformativeSetError(
            "informative set is empty: every outcome has estimated variance below c0; "
            "inference needs at least one outcome with non-negligible variance"
        )
    return keep


@dataclass
class BootstrapMax:
    """Bootstrap distribution of the max-abs standardized multiplier sum."""

    draws: np.ndarray  # (B,)

    def quantile(self, alpha: float) -> float:
        """``inf{x : mean(draws <= x) >= 1 - alpha}``."""
        s = np.sort(self.draws)
        k = int(math.ceil(len(s) * (1 - alpha) - 1e-9))
        return float(s[min(max(k, 1), len(s)) - 1])


def multiplier_bootstrap_max(infl_s, sd, B: int, seed: int) -> BootstrapMax:
    """Gaussian multiplier bootstrap of ``max_j |n^{-1/2} sum_i g_i infl_ij / sd_j|``.

    Multipliers are drawn in chunks of 256 draws from counter-keyed streams, so
    the result depends only on ``seed`` and ``B``.
    """
    infl_s = np.asarray(infl_s, float)
    if infl_s.ndim == 1:
        infl_s = infl_s[:, None]
    sd = np.atleast_1d(np.asarray(sd, float))
    n, S = infl_s.shape
    if S < 1:
        raise ValueError("need at least one column")
    if B < 200:
        raise ValueError("B must be >= 200")
    safe = np.where(sd > 0, sd, 1.0)
    Z = np.where(sd > 0, infl_s / safe, 0.0) / math.sqrt(n)
    out = np.empty(B)
    for c, start in enumerate(range(0, B, _CHUNK)):
        m = min(_CHUNK, B - start)
        g = stream(seed, 0xB007, c).standard_normal((m, n))
        out[start:start + m] = np.abs(g @ Z).max(axis=1)
    return BootstrapMax(out)


def simultaneous_ci(estimate, sd, critical_value: float, n: int):
    estimate = np.asarray(estimate, float)
    half = critical_value * np.asarray(sd, float) / math.sqrt(n)
    return estimate - half, estimate + half


def augmentation_size(n_rejected: int, c: float) -> int:
    # small guard so that e.g. 9 * 0.1 / 0.9 floors to 1
    return int(math.floor(n_rejected * c / (1 - c) + 1e-9))


@dataclass
class FdpResult:
    discoveries: np.ndarray  # sorted 0-based indices
    stepdown: list  # rejected indices in removal order
    augmented: list
    trace: list
    informative: np.ndarray
    t: np.ndarray
    variance: np.ndarray


def _order_by_abs_t(idx, t):
    # descending |t|, ties by smallest index
    idx = np.asarray(idx)
    return idx[np.lexsort((idx, -np.nan_to_num(np.abs(t[idx]), nan=-np.inf)))]


def stepdown_fdpex(infl, estimate=None, config: FdpConfig = FdpConfig()) -> FdpResult:
    """Step-down max-t procedure with augmentation for ``P(FDP > c) <= alpha``.

    Each iteration bootstraps the max statistic over the outcomes still in
    play (seed ``config.seed + iteration``) and rejects the largest ``|t|``
    while it exceeds the bootstrap quantile. The rejected set is then
    augmented with the next ``floor(|rejected| c / (1 - c))`` largest ``|t|``.
    """
    infl, estimate = _influence_and_estimate(infl, estimate)
    if config.B * config.alpha < 10:
        warnings.warn("B * alpha < 10: bootstrap quantile is poorly resolved", RuntimeWarning)
    n = infl.shape[0]
    variance, t = variance_and_t(infl, estimate)
    S = list(screen_informative(variance, config.c0))
    informative = np.array(S)
    sd = np.sqrt(variance)
    rejected, trace = [], []
    it = 0
    while S:
        S_arr = np.array(S)
        abs_t = np.nan_to_num(np.abs(t[S_arr]), nan=-np.inf)
        pos = int(np.argmax(abs_t))  # first maximum = smallest index, S is sorted
        max_abs_t = float(abs_t[pos])
        critical_value = multiplier_bootstrap_max(infl[:, S_arr], sd[S_arr], config.B,
                                                  config.seed + it).quantile(config.alpha)
        hit = max_abs_t > critical_value
        trace.append({"iteration": it, "size": len(S), "max_abs_t": max_abs_t,
                      "critical_value": critical_value, "rejected": int(S_arr[pos]) if hit else None})
        if not hit:
            break
        rejected.append(int(S_arr[pos]))
        del S[pos]
        it += 1
    else:
        trace.append({"iteration": it, "size": 0, "max_abs_t": float("nan"),
                      "critical_value": float("nan"), "rejected": None})
    k = augmentation_size(len(rejected), config.c) if rejected else 0
    augmented = [int(j) for j in _order_by_abs_t(S, t)[:k]] if S else []
    disc = np.array(sorted(rejected + augmented), dtype=int)
    return FdpResult(disc, rejected, augmented, trace, informative, t, variance)


def benjamini_hochberg(pvalues, q: float = 0.1) -> np.ndarray:
    """Boolean rejection mask of the BH step-up rule (comparator only)."""
    p = np.asarray(pvalues, float)
    m = p.size
    order = np.argsort(p, kind="stable")
    passed = p[order] <= q * np.arange(1, m + 1) / m
    mask = np.zeros(m, dtype=bool)
    if passed.any():
        mask[order[: np.flatnonzero(passed).max() + 1]] = True
    return mask


@dataclass
class TestReport:
    """Per-outcome estimates, tests and intervals for one target."""

    __test__ = False  # keep pytest from collecting this class

    estimate: np.ndarray
    variance: np.ndarray
    t: np.ndarray
    p_value: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    sim_low: np.ndarray
    sim_high: np.ndarray
    informative: np.ndarray
    discovered: np.ndarray
    n: int
    alpha: float
    critical_value: float
    labels: tuple = ()
    fdp: FdpResult | None = field(default=None, repr=False)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.variance / self.n)


def build_report(infl, estimate=None, alpha: float = 0.05, config: FdpConfig | None = None,
                 labels=()) -> TestReport:
    """Pointwise and simultaneous intervals at ``alpha`` plus FDPex discoveries."""
    infl, estimate = _influence_and_estimate(infl, estimate)
    config = config or FdpConfig()
    n, J = infl.shape
    variance, t = variance_and_t(infl, estimate)
    S1 = screen_informative(variance, config.c0)
    informative = np.zeros(J, dtype=bool)
    informative[S1] = True
    lo, hi = pointwise_ci(estimate, variance, n, alpha)
    sd = np.sqrt(variance)
    critical_value = multiplier_bootstrap_max(infl[:, S1], sd[S1], config.B, config.seed).quantile(alpha)
    slo, shi = simultaneous_ci(estimate, sd, critical_value, n)
    slo = np.where(informative, slo, np.nan)
    shi = np.where(informative, shi, np.nan)
    p = np.where(np.isfinite(t), 2 * norm.sf(np.abs(np.nan_to_num(t))), np.nan)
    res = stepdown_fdpex(infl, estimate, config)
    disc = np.zeros(J, dtype=bool)
    disc[res.discoveries] = True
    return TestReport(estimate, variance, t, p, lo, hi, slo, shi, informative, disc, n, alpha,
                      critical_value, tuple(labels), res)
