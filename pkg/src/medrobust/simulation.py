"""Seed/target simulation design with three regions and motion contamination.

Region 0 is the seed. The region-1 connectivity has a natural direct effect
of 0.3 and the region-2 connectivity has none. Motion (the mediator) shifts
the mean of the nuisance series, which in turn contaminates every region
with the same nonlinear signal.

Randomness: subject-level variables come from one Philox stream keyed by
``(seed, 0)``; subject ``i``'s time series come from the stream keyed by
``(seed, 1, i)``, so a subject's series do not depend on worker count or on
how many other subjects are generated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from .data import CohortDataset, SubjectRecord

N_REGIONS = 3
TRUE_NDE = (0.3, 0.0)
MEAN_M0 = 0.5

# noise scales for latent motion, mediator and outcome noise; read as standard
# deviations by default ("variance" reads them as variances)
_NOISE_PARAMS = {"u": 0.4, "m": 0.1, "s": 0.5}


def stream(*key: int) -> np.random.Generator:
    """Counter-based generator for an integer key path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class DgpConfig:
    n: int = 150
    T: int = 300
    rho: float = 0.3
    seed: int = 0
    fd_spike_threshold: float = 2.0
    variance_convention: str = "sd"

    def __post_init__(self):
        if self.n < 10:
            raise ValueError("n must be >= 10")
        if self.T < 20:
            raise ValueError("T must be >= 20")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if self.variance_convention not in ("variance", "sd"):
            raise ValueError("variance_convention must be 'variance' or 'sd'")

    def noise_sd(self, name: str) -> float:
        v = _NOISE_PARAMS[name]
        return float(np.sqrt(v)) if self.variance_convention == "variance" else v


@dataclass(frozen=True)
class DgpTruth:
    U_M: np.ndarray
    M: np.ndarray
    Y: np.ndarray  # n x 3 true outcomes for pairs (1,2), (1,3), (2,3)
    contamination: tuple[np.ndarray, ...] = field(repr=False)
    nde: tuple[float, float] = TRUE_NDE
    mean_m0: float = MEAN_M0


def sigma_w() -> np.ndarray:
    idx = np.arange(3)
    return 0.5 ** np.abs(idx[:, None] - idx[None, :])


def sigma_h() -> np.ndarray:
    idx = np.arange(3)
    return 0.3 ** np.abs(idx[:, None] - idx[None, :])


def propensity(W) -> np.ndarray:
    """P(A=1 | W) = 1 / (1 + exp(-0.2 + 0.4 * sum(W)))."""
    s = np.asarray(W, float).sum(axis=-1)
    return expit(0.2 - 0.4 * s)


def outcome_means(A, M, W) -> np.ndarray:
    """Noise-free parts of the two causal outcomes, shape (n, 2)."""
    A = np.asarray(A, float)
    M = np.asarray(M, float)
    s = np.asarray(W, float).sum(axis=-1)
    y1 = 0.1 + 0.6 * A + M - 0.6 * A * M + 0.1 * s
    y2 = 0.1 + 0.2 * A - 0.4 * A * M + 0.1 * s
    return np.column_stack([y1, y2])


def gen_subject_level(config: DgpConfig) -> dict:
    """Confounders, treatment, latent motion, mediator and true outcomes."""
    rng = stream(config.seed, 0)
    n = config.n
    W = rng.multivariate_normal(np.zeros(3), sigma_w(), size=n)
    A = (rng.random(n) < propensity(W)).astype(int)
    U = 0.5 + 0.5 * A + 0.1 * W.sum(axis=1) + config.noise_sd("u") * rng.standard_normal(n)
    M = U + config.noise_sd("m") * rng.standard_normal(n)
    eps = config.noise_sd("s") * rng.standard_normal((n, 2))
    Y12 = outcome_means(A, M, W) + eps
    y3 = np.arctanh(np.tanh(Y12[:, 0]) * np.tanh(Y12[:, 1]))
    return {"W": W, "A": A, "U_M": U, "M": M, "Y": np.column_stack([Y12, y3])}


def contamination_series(H, spike_threshold: float = 2.0) -> np.ndarray:
    """Common motion signal added to every region at each time point."""
    h1, h2, h3 = H
    fd = np.abs(H[:3]).sum(axis=0)
    return 0.6 * h1 * h3 - 0.8 * h2 * h3 + 0.8 * (fd > spike_threshold) * h1 * h2


def gen_time_series(u_m: float, y1: float, y2: float, config: DgpConfig, rng) -> tuple:
    """Return ``(X, H, contamination)`` for one subject; X is 3 x T."""
    T, rho = config.T, config.rho
    H = rng.multivariate_normal(np.full(3, u_m / 3.0), sigma_h(), size=T).T
    r1, r2 = np.tanh(y1), np.tanh(y2)
    Z = rng.standard_normal((3, T))
    E = np.empty((3, T))
    E[0] = Z[0]
    E[1] = r1 * Z[0] + np.sqrt(1 - r1**2) * Z[1]
    E[2] = r2 * Z[0] + np.sqrt(1 - r2**2) * Z[2]
    S = np.empty_like(E)
    S[:, 0] = E[:, 0]
    S[:, 1:] = rho * E[:, :-1] + np.sqrt(1 - rho**2) * E[:, 1:]
    c = contamination_series(H, config.fd_spike_threshold)
    return S + c, H, c


def gen_cohort(config: DgpConfig) -> tuple[CohortDataset, DgpTruth]:
    sub = gen_subject_level(config)
    subjects, contam = [], []
    for i in range(config.n):
        X, H, c = gen_time_series(sub["U_M"][i], sub["Y"][i, 0], sub["Y"][i, 1],
                                  config, stream(config.seed, 1, i))
        subjects.append(SubjectRecord(f"s{i:05d}", sub["A"][i], sub["W"][i], sub["M"][i], X, H))
        c.setflags(write=False)
        contam.append(c)
    truth = DgpTruth(sub["U_M"], sub["M"], sub["Y"], tuple(contam))
    return CohortDataset(tuple(subjects)), truth


class OracleNuisances:
    """Closed-form nuisance functions when the causal outcomes are observed.

    Outcome index ``j`` is 0 (region 1) or 1 (region 2).
    """

    def __init__(self, config: DgpConfig | None = None):
        config = config or DgpConfig()
        self.mediator_sd = float(np.hypot(config.noise_sd("u"), config.noise_sd("m")))

    @staticmethod
    def p_treat_w(W) -> np.ndarray:
        return propensity(W)

    @staticmethod
    def mediator_mean(a, W) -> np.ndarray:
        return 0.5 + 0.5 * a + 0.1 * np.asarray(W, float).sum(axis=-1)

    def p_treat_mw(self, M, W) -> np.ndarray:
        """P(A=1 | M, W) via Bayes' rule with Gaussian M | A, W."""
        sd = self.mediator_sd
        log_ratio = norm.logpdf(M, self.mediator_mean(1, W), sd) - norm.logpdf(
            M, self.mediator_mean(0, W), sd
        )
        return expit(logit(self.p_treat_w(W)) + log_ratio)

    @staticmethod
    def outcome_mean(j: int, M, a, W) -> np.ndarray:
        M = np.asarray(M, float)
        return outcome_means(np.full_like(M, a), M, W)[:, j]

    def seqreg_mean(self, j: int, a: int, a_prime: int, W) -> np.ndarray:
        # the outcome mean is linear in m, so integrating over M | a', W plugs in the mean
        return self.outcome_mean(j, self.mediator_mean(a_prime, W), a, W)

    @staticmethod
    def counterfactual_mean(j: int, a: int, a_prime: int) -> float:
        em = 0.5 + 0.5 * a_prime
        if j == 0:
            return 0.1 + 0.6 * a + (1 - 0.6 * a) * em
        return 0.1 + 0.2 * a - 0.4 * a * em


def oracle_nuisances(config: DgpConfig | None = None) -> OracleNuisances:
    return OracleNuisances(config)
