"""Method pipelines, Monte Carlo replication and summary metrics."""

from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.stats import norm

from .config import RunConfig
from .data import CohortDataset, DerivedOutcomeMatrix
from .estimator import CausalTarget, NuisanceFitError, estimate_target
from .intra import IntraSubjectProcessor
from .outcomes import DerivedOutcomeTransformer
from .simulation import TRUE_NDE, DgpConfig, DgpTruth, gen_cohort

logger = logging.getLogger(__name__)


class IntraKind(str, Enum):
    KNOWN_F = "none_known_f"
    P12 = "12p"
    P12_SCRUB = "12p_scrub"
    ENSEMBLE = "ensemble"


class InterKind(str, Enum):
    LINEAR_A_W = "linear_A_W"
    LINEAR_A_M_W = "linear_A_M_W"
    AIPW = "aipw"


_INTRA_METHOD = {
    IntraKind.KNOWN_F: "known_f",
    IntraKind.P12: "linear_12p",
    IntraKind.P12_SCRUB: "linear_12p_scrub",
    IntraKind.ENSEMBLE: "ensemble_stack",
}


@dataclass(frozen=True)
class MethodPipeline:
    intra: IntraKind
    inter: InterKind
    label: str


CANONICAL_PIPELINES = {
    p.label: p
    for p in (
        MethodPipeline(IntraKind.P12, InterKind.LINEAR_A_W, "12p+Linear"),
        MethodPipeline(IntraKind.P12, InterKind.LINEAR_A_M_W, "12p+Linear M"),
        MethodPipeline(IntraKind.P12_SCRUB, InterKind.LINEAR_A_W, "12p Scrub+Linear"),
        MethodPipeline(IntraKind.P12_SCRUB, InterKind.LINEAR_A_M_W, "12p Scrub+Linear M"),
        MethodPipeline(IntraKind.ENSEMBLE, InterKind.AIPW, "SL+AIPW"),
        MethodPipeline(IntraKind.KNOWN_F, InterKind.AIPW, "KnownF+AIPW"),
    )
}

ALIASES = {
    "12p_linear": "12p+Linear",
    "12p_linear_m": "12p+Linear M",
    "12p_scrub_linear": "12p Scrub+Linear",
    "12p_scrub_linear_m": "12p Scrub+Linear M",
    "sl_aipw": "SL+AIPW",
    "knownf_aipw": "KnownF+AIPW",
}


def get_pipeline(name: str) -> MethodPipeline:
    label = ALIASES.get(name, name)
    if label not in CANONICAL_PIPELINES:
        raise ValueError(f"unknown method {name!r}; choose from {sorted(ALIASES)}")
    return CANONICAL_PIPELINES[label]


def sub_seed(*key: int) -> int:
    """32-bit seed derived from an integer key path (prefix-stable)."""
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def worker_count() -> int:
    env = os.environ.get("MEDROBUST_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# intra stage


@dataclass
class DerivedOutcomes:
    matrix: DerivedOutcomeMatrix | None
    usable: np.ndarray
    n_excluded: int


def derive_outcomes(cohort: CohortDataset, intra: IntraKind | str, cfg: RunConfig | None = None,
                    seed: int = 0, truth: DgpTruth | None = None) -> DerivedOutcomes:
    """Run intra-subject processing and derive the outcome matrix."""
    cfg = cfg or RunConfig()
    intra = IntraKind(intra)
    if intra is IntraKind.KNOWN_F and truth is None:
        raise ValueError("known-f processing needs the simulation truth")
    proc = IntraSubjectProcessor(
        method=_INTRA_METHOD[intra],
        fd_threshold=cfg.intra.fd_threshold,
        max_removed_frac=cfg.intra.max_removed_frac,
        fd_mode=cfg.intra.fd_mode,
        library=tuple(cfg.learners.intra),
        n_folds=cfg.intra.n_folds,
    )
    residuals, excluded = [], 0
    for i, subj in enumerate(cohort.subjects):
        if not subj.usable:
            residuals.append(None)
            continue
        known = truth.contamination[i] if intra is IntraKind.KNOWN_F else None
        res, info = proc.process(subj, known_f=known, seed=sub_seed(seed, i))
        if info is not None and info.excluded:
            excluded += 1
        residuals.append(res)
    tr = DerivedOutcomeTransformer(cfg.intra.outcome_kind, cfg.intra.clamp_eps).fit()
    try:
        mat = tr.transform(residuals, cohort.ids)
    except ValueError:
        return DerivedOutcomes(None, np.zeros(len(residuals), bool), excluded)
    return DerivedOutcomes(mat, tr.usable_, excluded)


# --------------------------------------------------------------------------
# inter stage


@dataclass
class PipelineResult:
    estimate: np.ndarray
    se: np.ndarray
    p_value: np.ndarray
    n_used: int
    n_excluded: int = 0
    failed: bool = False
    message: str = ""


def ols_treatment_effect(Y, A, covariates):
    """Coefficient on ``A`` from OLS of each column of ``Y`` on (1, A, covariates).

    Returns ``(estimate, se, p_value)`` with classical homoskedastic standard
    errors and two-sided normal p-values.
    """
    Y = np.asarray(Y, float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = Y.shape[0]
    X = np.column_stack([np.ones(n), np.asarray(A, float), np.asarray(covariates, float).reshape(n, -1)])
    d = X.shape[1]
    if n <= d:
        raise ValueError(f"need more subjects than regressors ({n} <= {d})")
    XtX_inv = np.linalg.pinv(X.T @ X)
    coef = XtX_inv @ X.T @ Y
    resid = Y - X @ coef
    sigma2 = np.sum(resid**2, axis=0) / (n - d)
    se = np.sqrt(sigma2 * XtX_inv[1, 1])
    est = coef[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, est / se, np.inf * np.sign(est))
    p = 2 * norm.sf(np.abs(z))
    return est, se, p


def _failed(J, n_used, excluded, msg) -> PipelineResult:
    nan = np.full(J, np.nan)
    return PipelineResult(nan, nan.copy(), nan.copy(), n_used, excluded, True, msg)


def run_inter(Yhat, A, M, W, inter: InterKind | str, cfg: RunConfig | None = None, seed: int = 0,
              ids=None, n_excluded: int = 0) -> PipelineResult:
    cfg = cfg or RunConfig()
    inter = InterKind(inter)
    Yhat = np.asarray(Yhat, float)
    if Yhat.ndim == 1:
        Yhat = Yhat[:, None]
    A = np.asarray(A).astype(int)
    n, J = Yhat.shape
    if not (np.any(A == 0) and np.any(A == 1)):
        return _failed(J, n, n_excluded, "a treatment arm is empty")
    if inter is InterKind.LINEAR_A_W:
        est, se, p = ols_treatment_effect(Yhat, A, W)
    elif inter is InterKind.LINEAR_A_M_W:
        est, se, p = ols_treatment_effect(Yhat, A, np.column_stack([M, W]))
    else:
        try:
            res = estimate_target(
                W, A, M, Yhat, CausalTarget.parse(cfg.estimator.target),
                tuple(cfg.learners.regression), tuple(cfg.learners.propensity),
                cfg.estimator.n_folds, seed, cfg.estimator.clip_eps, ids,
            )
        except (NuisanceFitError, ValueError) as exc:
            return _failed(J, n, n_excluded, str(exc))
        est = res.estimate
        se = np.sqrt(np.mean(res.values**2, axis=0) / n)
        with np.errstate(divide="ignore", invalid="ignore"):
            p = 2 * norm.sf(np.abs(est / se))
    return PipelineResult(np.asarray(est), np.asarray(se), np.asarray(p), n, n_excluded)


def run_pipeline(cohort: CohortDataset, pipeline: MethodPipeline | str, cfg: RunConfig | None = None,
                 seed: int = 0, truth: DgpTruth | None = None, outcomes=None,
                 derived: DerivedOutcomes | None = None) -> PipelineResult:
    """Intra processing, outcome derivation and the inter-subject estimate.

    ``outcomes`` selects derived-outcome columns (default: all). A precomputed
    ``derived`` result can be passed to share the intra stage across pipelines.
    """
    cfg = cfg or RunConfig()
    if isinstance(pipeline, str):
        pipeline = get_pipeline(pipeline)
    if derived is None:
        derived = derive_outcomes(cohort, pipeline.intra, cfg, seed, truth)
    J = len(outcomes) if outcomes is not None else None
    if derived.matrix is None:
        return _failed(J or 1, 0, derived.n_excluded, "no usable subjects")
    Y = derived.matrix.values
    if outcomes is not None:
        Y = Y[:, list(outcomes)]
    keep = derived.usable
    A = cohort.treatment[keep]
    M = cohort.mediator[keep]
    W = cohort.confounders[keep]
    ids = np.asarray(cohort.ids, dtype=object)[keep]
    return run_inter(Y, A, M, W, pipeline.inter, cfg, seed, ids, derived.n_excluded)


# --------------------------------------------------------------------------
# replication


def dgp_from_config(cfg: RunConfig, seed: int) -> DgpConfig:
    s = cfg.simulate
    return DgpConfig(n=s.n, T=s.T, rho=s.rho, seed=seed, fd_spike_threshold=s.fd_spike_threshold,
                     variance_convention=s.variance_convention)


def replication_seed(base_seed: int, r: int) -> int:
    return sub_seed(base_seed, r)


def run_replication(cfg: RunConfig, pipelines, r: int, base_seed: int) -> dict:
    """All pipelines on one simulated cohort; the intra stage is shared per kind."""
    seed = replication_seed(base_seed, r)
    cohort, truth = gen_cohort(dgp_from_config(cfg, seed))
    cache, out = {}, {}
    for p in pipelines:
        if p.intra not in cache:
            cache[p.intra] = derive_outcomes(cohort, p.intra, cfg, seed, truth)
        out[p.label] = run_pipeline(cohort, p, cfg, seed, truth, cfg.simulate.outcomes, cache[p.intra])
    return out


def _rep_job(args):
    cfg_dict, labels, r, base_seed = args
    cfg = RunConfig.from_dict(cfg_dict)
    return run_replication(cfg, [get_pipeline(lbl) for lbl in labels], r, base_seed)


@dataclass
class MetricsTable:
    """Per-replication estimates and the summary metrics derived from them."""

    labels: tuple
    outcomes: tuple
    truth: np.ndarray
    estimates: dict  # label -> R x J (NaN where failed)
    se: dict
    p_values: dict
    failed: dict  # label -> R bool
    excluded: dict  # label -> R int (subjects excluded by scrubbing)
    seeds: np.ndarray
    alpha: float = 0.05
    messages: dict = field(default_factory=dict)

    @property
    def R(self) -> int:
        return len(self.seeds)

    def cell(self, label: str, j: int) -> dict:
        ok = ~self.failed[label]
        e = self.estimates[label][ok, j]
        truth = self.truth[j]
        R = e.size
        bias = float(np.mean(e) - truth) if R else float("nan")
        sd = float(np.std(e, ddof=1)) if R > 1 else float("nan")
        mse = float(np.mean((e - truth) ** 2)) if R else float("nan")
        rej = float(np.mean(self.p_values[label][ok, j] < self.alpha)) if R else float("nan")
        return {
            "method": label, "outcome": int(self.outcomes[j]), "truth": float(truth),
            "bias": bias, "sd": sd, "mse": mse, "rejection_rate": rej, "n_ok": int(R),
            "n_failed": int((~ok).sum()), "excluded_subjects": int(self.excluded[label].sum()),
        }

    def rows(self) -> list[dict]:
        return [self.cell(lbl, j) for lbl in self.labels for j in range(len(self.outcomes))]


METRIC_COLUMNS = ("method", "outcome", "truth", "bias", "sd", "mse", "rejection_rate",
                  "n_ok", "n_failed", "excluded_subjects")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if not np.isfinite(v) else f"{float(v):.10g}"
    return str(v)


def metrics_tsv(table: MetricsTable) -> str:
    lines = ["\t".join(METRIC_COLUMNS)]
    for row in table.rows():
        lines.append("\t".join(_fmt(row[c]) for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def estimates_tsv(table: MetricsTable) -> str:
    lines = ["\t".join(["rep", "seed", "method", "outcome", "estimate", "se", "p_value",
                        "failed", "excluded_subjects"])]
    for r in range(table.R):
        for lbl in table.labels:
            for j, o in enumerate(table.outcomes):
                lines.append("\t".join([
                    str(r), str(int(table.seeds[r])), lbl, str(o),
                    _fmt(table.estimates[lbl][r, j]), _fmt(table.se[lbl][r, j]),
                    _fmt(table.p_values[lbl][r, j]), str(int(table.failed[lbl][r])),
                    str(int(table.excluded[lbl][r])),
                ]))
    return "\n".join(lines) + "\n"


def replicate(cfg: RunConfig | DgpConfig | None = None, pipelines=("12p+Linear",), R: int = 100,
              base_seed: int = 0, threads: int | None = None, truth=None) -> MetricsTable:
    """Run ``R`` replications of every pipeline on common simulated cohorts.

    Replication ``r`` uses the cohort seed ``sub_seed(base_seed, r)``, so the
    first ``R`` replications do not depend on the total count or on the
    number of workers.
    """
    if R < 2:
        raise ValueError("R must be >= 2")
    if isinstance(cfg, DgpConfig):
        rc = RunConfig()
        rc.simulate = dataclasses.replace(
            rc.simulate, n=cfg.n, T=cfg.T, rho=cfg.rho, fd_spike_threshold=cfg.fd_spike_threshold,
            variance_convention=cfg.variance_convention)
        cfg = rc
    cfg = cfg or RunConfig()
    pipes = [p if isinstance(p, MethodPipeline) else get_pipeline(p) for p in pipelines]
    labels = tuple(p.label for p in pipes)
    outcomes = tuple(cfg.simulate.outcomes)
    if truth is None:
        truth = np.array([TRUE_NDE[o] if o < len(TRUE_NDE) else np.nan for o in outcomes])
    threads = threads or worker_count()
    jobs = [(cfg.to_dict(), labels, r, base_seed) for r in range(R)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_rep_job, jobs))
    else:
        results = [run_replication(cfg, pipes, r, base_seed) for r in range(R)]
    J = len(outcomes)
    est = {lbl: np.full((R, J), np.nan) for lbl in labels}
    se = {lbl: np.full((R, J), np.nan) for lbl in labels}
    pv = {lbl: np.full((R, J), np.nan) for lbl in labels}
    failed = {lbl: np.zeros(R, bool) for lbl in labels}
    excl = {lbl: np.zeros(R, int) for lbl in labels}
    msgs = {lbl: [] for lbl in labels}
    for r, res in enumerate(results):
        for lbl in labels:
            pr = res[lbl]
            est[lbl][r], se[lbl][r], pv[lbl][r] = pr.estimate, pr.se, pr.p_value
            failed[lbl][r] = pr.failed
            excl[lbl][r] = pr.n_excluded
            if pr.failed:
                msgs[lbl].append((r, pr.message))
    seeds = np.array([replication_seed(base_seed, r) for r in range(R)])
    return MetricsTable(labels, outcomes, np.asarray(truth, float), est, se, pv, failed, excl,
                        seeds, 0.05, msgs)


# --------------------------------------------------------------------------
# derived-outcome diagnostics (simulation only)


def derived_outcome_errors(cohort, truth: DgpTruth, intra=IntraKind.ENSEMBLE,
                           cfg: RunConfig | None = None, seed: int = 0):
    """Return ``(Yhat, Ytilde, Y)`` over subjects usable under both processings.

    ``Ytilde`` uses the true contamination, so ``Yhat - Ytilde`` isolates the
    error from the fitted nuisance function and ``Ytilde - Y`` the error from
    finite-T estimation of the connectivity itself.
    """
    if not isinstance(truth, DgpTruth):
        raise TypeError("derived-outcome diagnostics are only available on simulated data")
    fit = derive_outcomes(cohort, intra, cfg, seed, truth)
    known = derive_outcomes(cohort, IntraKind.KNOWN_F, cfg, seed, truth)
    both = fit.usable & known.usable
    yhat = fit.matrix.values[both[fit.usable]]
    ytil = known.matrix.values[both[known.usable]]
    return yhat, ytil, truth.Y[both]


def derived_bias_diagnostic(source, T_grid, intra=IntraKind.ENSEMBLE, cfg: RunConfig | None = None,
                            seed: int = 0) -> list[dict]:
    """Bias of derived outcomes over a grid of series lengths.

    For each ``T``: ``total`` = max_j |mean(Yhat_j - Y_j)|, split into the
    fitted-nuisance part (Yhat - Ytilde) and the finite-T part (Ytilde - Y);
    ``mean_max_abs_error`` averages max_j |Yhat_j - Y_j| over subjects.
    """
    if not isinstance(source, DgpConfig):
        raise TypeError("derived-outcome diagnostics are only available on simulated data")
    rows = []
    for T in T_grid:
        cohort, truth = gen_cohort(dataclasses.replace(source, T=int(T)))
        yhat, ytil, y = derived_outcome_errors(cohort, truth, intra, cfg, seed)
        rows.append({
            "T": int(T),
            "total": float(np.max(np.abs(np.mean(yhat - y, axis=0)))),
            "f_part": float(np.max(np.abs(np.mean(yhat - ytil, axis=0)))),
            "g_part": float(np.max(np.abs(np.mean(ytil - y, axis=0)))),
            "mean_max_abs_error": float(np.mean(np.max(np.abs(yhat - y), axis=1))),
            "n_subjects": int(y.shape[0]),
        })
    return rows


# --------------------------------------------------------------------------
# single-cohort analysis (used by the estimate command)


@dataclass
class CohortAnalysis:
    derived: DerivedOutcomes
    influence: dict  # target label -> InfluenceMatrix
    reports: dict  # target label -> TestReport


def analyze_cohort(cohort: CohortDataset, cfg: RunConfig | None = None, targets=("nde",),
                   truth: DgpTruth | None = None) -> CohortAnalysis:
    """Intra processing, outcome derivation, AIPW for each target, and inference.

    All component means needed by the requested targets are estimated once, so
    the contrasts share nuisance fits (and ATE = NDE + NIE holds exactly up to
    rounding).
    """
    from .inference import FdpConfig, build_report

    cfg = cfg or RunConfig()
    parsed = [CausalTarget.parse(t) if isinstance(t, str) else t for t in targets]
    derived = derive_outcomes(cohort, cfg.intra.method, cfg, cfg.seed, truth)
    if derived.matrix is None:
        raise ValueError("no usable subjects after intra-subject processing")
    keep = derived.usable
    A = cohort.treatment[keep]
    if not (np.any(A == 0) and np.any(A == 1)):
        raise ValueError("a treatment arm is empty after exclusions")
    comps = sorted({key for t in parsed for key, _ in t.components})
    ids = np.asarray(cohort.ids, dtype=object)[keep]
    base = estimate_target(
        cohort.confounders[keep], A, cohort.mediator[keep], derived.matrix.values, parsed[0],
        tuple(cfg.learners.regression), tuple(cfg.learners.propensity), cfg.estimator.n_folds,
        cfg.seed, cfg.estimator.clip_eps, ids, extra_components=comps,
    )
    fdp = FdpConfig(cfg.inference.fdp_c, cfg.inference.fdp_alpha, cfg.inference.c0,
                    cfg.inference.boot_b, cfg.seed)
    labels = tuple(p.label for p in derived.matrix.pairs)
    influence, reports = {}, {}
    for t in parsed:
        im = base if t == parsed[0] else base.contrast(t)
        influence[t.label] = im
        reports[t.label] = build_report(im, alpha=cfg.inference.alpha, config=fdp, labels=labels)
    return CohortAnalysis(derived, influence, reports)


# --------------------------------------------------------------------------
# multiple robustness with oracle nuisances


ROBUSTNESS_CONFIGS = {
    "propensities": ("prop_w", "prop_mw"),
    "outcome+prop_w": ("outcome", "prop_w"),
    "outcome+seqreg": ("outcome", "seqreg"),
    "none": (),
}


def robustness_nde(n: int, seed: int, correct, prop_scale: float = 1.0, reg_scale: float = 0.1,
                   variance_convention: str = "sd") -> np.ndarray:
    """NDE (regions 1 and 2) from AIPW with oracle-based nuisances on observed outcomes.

    Components named in ``correct`` are the oracle plus a perturbation shrinking
    like ``n^{-1/4}`` (a consistent estimator); the others carry a fixed
    misspecification that does not vanish with ``n``.
    """
    from scipy.special import expit, logit

    from .estimator import aipw_terms
    from .simulation import OracleNuisances, gen_subject_level

    unknown = set(correct) - {"prop_w", "prop_mw", "outcome", "seqreg"}
    if unknown:
        raise ValueError(f"unknown nuisance components {sorted(unknown)}")
    cfg = DgpConfig(n=n, seed=seed, variance_convention=variance_convention)
    orc = OracleNuisances(cfg)
    s = gen_subject_level(cfg)
    W, A, M, Y = s["W"], s["A"], s["M"], s["Y"][:, :2]
    w1, w2 = W[:, 0], W[:, 1]
    dp, dr = prop_scale * n**-0.25, reg_scale * n**-0.25
    lw, lmw = logit(orc.p_treat_w(W)), logit(orc.p_treat_mw(M, W))
    p_treat_w = expit(lw + dp * w1) if "prop_w" in correct else expit(lw + 0.8 + 0.6 * w1)
    p_treat_mw = expit(lmw + dp * w2) if "prop_mw" in correct else expit(lmw - 0.8 + 0.6 * w2)
    est = 0.0
    for (a, ap), sign in NDE_COMPONENTS:
        outcome = np.column_stack([orc.outcome_mean(j, M, a, W) for j in range(2)])
        seqreg = np.column_stack([orc.seqreg_mean(j, a, ap, W) for j in range(2)])
        if "outcome" in correct:
            outcome = outcome + dr * (1 + w1)[:, None]
        else:
            outcome = outcome + 0.5 + 0.4 * (M * (1 + w1))[:, None]
        if "seqreg" in correct:
            seqreg = seqreg + dr * w2[:, None]
        else:
            seqreg = seqreg - 0.4 + 0.3 * w1[:, None]
        est = est + sign * aipw_terms(a, ap, Y, A, p_treat_w, p_treat_mw, outcome, seqreg).mean(axis=0)
    return np.asarray(est)


NDE_COMPONENTS = CausalTarget("nde").components


def robustness_bias(correct, n: int, R: int, base_seed: int = 0, **kwargs):
    """Monte Carlo bias and its standard error for :func:`robustness_nde`."""
    est = np.array([robustness_nde(n, sub_seed(base_seed, n, r), correct, **kwargs) for r in range(R)])
    return est.mean(axis=0) - np.asarray(TRUE_NDE), est.std(axis=0, ddof=1) / np.sqrt(R)
