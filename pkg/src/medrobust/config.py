"""Run configuration: one JSON document with every tunable spelled out."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .inference import C0_DEFAULT
from .learners import (
    CLIP_EPS,
    DEFAULT_INTRA_LIBRARY,
    DEFAULT_PROPENSITY_LIBRARY,
    DEFAULT_REGRESSION_LIBRARY,
    LearnerSpec,
)
from .outcomes import CLAMP_EPS

SECTIONS = ("intra", "learners", "estimator", "inference", "simulate")


@dataclass
class IntraSection:
    method: str = "ensemble"
    fd_threshold: float = 3.0
    max_removed_frac: float = 0.35
    fd_mode: str = "abs_sum_sim"
    n_folds: int = 5
    outcome_kind: str = "fisher_z_corr"
    clamp_eps: float = CLAMP_EPS


@dataclass
class LearnersSection:
    regression: list = field(default_factory=lambda: list(DEFAULT_REGRESSION_LIBRARY))
    propensity: list = field(default_factory=lambda: list(DEFAULT_PROPENSITY_LIBRARY))
    intra: list = field(default_factory=lambda: list(DEFAULT_INTRA_LIBRARY))


@dataclass
class EstimatorSection:
    target: str = "nde"
    n_folds: int = 5
    clip_eps: float = CLIP_EPS


@dataclass
class InferenceSection:
    alpha: float = 0.05
    fdp_c: float = 0.1
    fdp_alpha: float = 0.1
    c0: float = C0_DEFAULT
    boot_b: int = 1000


@dataclass
class SimulateSection:
    n: int = 150
    T: int = 300
    rho: float = 0.3
    reps: int = 100
    methods: list = field(default_factory=lambda: ["12p+Linear", "12p+Linear M", "SL+AIPW"])
    fd_spike_threshold: float = 2.0
    variance_convention: str = "sd"
    outcomes: list = field(default_factory=lambda: [0, 1])


@dataclass
class RunConfig:
    seed: int = 0
    intra: IntraSection = field(default_factory=IntraSection)
    learners: LearnersSection = field(default_factory=LearnersSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            if name == "learners":
                sec = {k: [s.to_dict() for s in getattr(self.learners, k)] for k in sec}
            out[name] = sec
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        types = {"intra": IntraSection, "learners": LearnersSection, "estimator": EstimatorSection,
                 "inference": InferenceSection, "simulate": SimulateSection}
        kwargs = {"seed": int(d.get("seed", 0))}
        for name, typ in types.items():
            sec = dict(d.get(name, {}))
            bad = set(sec) - {f.name for f in dataclasses.fields(typ)}
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            if name == "learners":
                sec = {k: [v if isinstance(v, LearnerSpec) else LearnerSpec.from_dict(v) for v in lst]
                       for k, lst in sec.items()}
            kwargs[name] = typ(**sec)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]
