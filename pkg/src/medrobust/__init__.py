"""Multiply robust mediation inference for outcomes derived from processed time series."""

__version__ = "0.1.0"

from .data import CohortDataset, DerivedOutcomeMatrix, PairIndex, SubjectRecord, pair_index
from .estimator import ATE, NDE, NIE, CausalTarget, MediationAIPW, estimate_target
from .inference import FdpConfig, TestReport, build_report, stepdown_fdpex
from .intra import IntraSubjectProcessor
from .learners import LearnerSpec, SuperLearner, cv_stack
from .outcomes import DerivedOutcomeTransformer, derive_fc
from .simulation import DgpConfig, gen_cohort, oracle_nuisances

__all__ = [
    "ATE",
    "NDE",
    "NIE",
    "CausalTarget",
    "CohortDataset",
    "DerivedOutcomeMatrix",
    "DerivedOutcomeTransformer",
    "DgpConfig",
    "FdpConfig",
    "IntraSubjectProcessor",
    "LearnerSpec",
    "MediationAIPW",
    "PairIndex",
    "SubjectRecord",
    "SuperLearner",
    "TestReport",
    "build_report",
    "cv_stack",
    "derive_fc",
    "estimate_target",
    "gen_cohort",
    "oracle_nuisances",
    "pair_index",
    "stepdown_fdpex",
]
