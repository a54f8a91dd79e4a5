"""Core records shared by every stage of the pipeline.

Subjects are stored as immutable dataclasses holding numpy arrays. Outcome
index ``j`` always refers to the lexicographic upper-triangle pair ordering
produced by :func:`pair_index` (regions are 1-based in the pair labels).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes are inconsistent with the requested operation."""


class OutcomeKind(str, Enum):
    FISHER_Z_CORR = "fisher_z_corr"
    RAW_CROSS_PRODUCT = "raw_cross_product"


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: treatment, confounders, mediator and intra-subject series.

    ``response`` is V x T and ``nuisance`` is p x T; both share the same T.
    """

    id: str
    treatment: int
    confounders: np.ndarray
    mediator: float
    response: np.ndarray
    nuisance: np.ndarray
    usable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "treatment", int(self.treatment))
        object.__setattr__(self, "mediator", float(self.mediator))
        object.__setattr__(
            self, "confounders", _frozen_array(self.confounders, 1, "confounders")
        )
        object.__setattr__(self, "response", _frozen_array(self.response, 2, "response"))
        object.__setattr__(self, "nuisance", _frozen_array(self.nuisance, 2, "nuisance"))

    @property
    def n_regions(self) -> int:
        return self.response.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.response.shape[1]

    def with_usable(self, usable: bool) -> "SubjectRecord":
        return SubjectRecord(
            self.id,
            self.treatment,
            self.confounders,
            self.mediator,
            self.response,
            self.nuisance,
            usable,
        )


@dataclass(frozen=True)
class CohortDataset:
    subjects: tuple[SubjectRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))

    def __len__(self) -> int:
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def __getitem__(self, idx):
        return self.subjects[idx]

    @property
    def dims(self) -> tuple[int, int, int, int, int]:
        """``(n, q, p, V, T)`` taken from the first subject (T may vary)."""
        if not self.subjects:
            return (0, 0, 0, 0, 0)
        s = self.subjects[0]
        return (
            len(self.subjects),
            s.confounders.shape[0],
            s.nuisance.shape[0],
            s.response.shape[0],
            s.response.shape[1],
        )

    @property
    def treatment(self) -> np.ndarray:
        return np.array([s.treatment for s in self.subjects], dtype=int)

    @property
    def mediator(self) -> np.ndarray:
        return np.array([s.mediator for s in self.subjects], dtype=float)

    @property
    def confounders(self) -> np.ndarray:
        return np.vstack([s.confounders for s in self.subjects])

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    def usable_only(self) -> "CohortDataset":
        return CohortDataset(tuple(s for s in self.subjects if s.usable))


@dataclass(frozen=True)
class PairIndex:
    j: int
    v: int
    v_prime: int

    @property
    def label(self) -> str:
        return f"{self.v}-{self.v_prime}"


def n_pairs(V: int) -> int:
    return V * (V - 1) // 2


def pair_index(V: int) -> list[PairIndex]:
    """Lexicographic upper-triangle pairs ``(v, v')`` with ``1 <= v < v' <= V``."""
    if V < 2:
        raise DimensionError(f"need at least 2 regions, got V={V}")
    out = []
    j = 0
    for v in range(1, V + 1):
        for vp in range(v + 1, V + 1):
            out.append(PairIndex(j, v, vp))
            j += 1
    return out


def pair_to_j(v: int, v_prime: int, V: int) -> int:
    """Inverse of :func:`pair_index` (1-based regions, ``v < v'``)."""
    if not 1 <= v < v_prime <= V:
        raise DimensionError(f"invalid pair ({v}, {v_prime}) for V={V}")
    # rows before v contribute (V-1) + (V-2) + ... + (V-v+1) pairs
    before = (v - 1) * V - (v - 1) * v // 2
    return before + (v_prime - v - 1)


@dataclass(frozen=True)
class DerivedOutcomeMatrix:
    values: np.ndarray
    pairs: tuple[PairIndex, ...]
    outcome_kind: OutcomeKind = OutcomeKind.FISHER_Z_CORR
    ids: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        values = _frozen_array(self.values, 2, "values")
        if values.shape[1] != len(self.pairs):
            raise DimensionError(
                f"{values.shape[1]} outcome columns but {len(self.pairs)} pairs"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("derived outcomes must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "pairs", tuple(self.pairs))
        object.__setattr__(self, "outcome_kind", OutcomeKind(self.outcome_kind))
        object.__setattr__(self, "ids", tuple(self.ids))

    @property
    def n_outcomes(self) -> int:
        return len(self.pairs)

    @property
    def labels(self) -> list[str]:
        return [p.label for p in self.pairs]


def validate_cohort(dataset: CohortDataset | Sequence[SubjectRecord]) -> list[str]:
    """Return a list of human-readable violations; empty means valid.

    Checks finiteness, treatment coding, per-subject T agreement between
    response and nuisance, shared (q, p, V) across subjects, minimum sizes
    and that both treatment arms are represented.
    """
    subjects = list(dataset)
    problems: list[str] = []
    if len(subjects) < 2:
        problems.append(f"cohort has {len(subjects)} subjects; need at least 2")
    ref = None
    for s in subjects:
        tag = f"subject {s.id!r}"
        if s.treatment not in (0, 1):
            problems.append(f"{tag}: treatment {s.treatment} not in {{0,1}}")
        if not np.isfinite(s.mediator):
            problems.append(f"{tag}: non-finite mediator")
        if not np.all(np.isfinite(s.confounders)):
            problems.append(f"{tag}: non-finite confounders")
        if not np.all(np.isfinite(s.response)):
            problems.append(f"{tag}: non-finite response series")
        if not np.all(np.isfinite(s.nuisance)):
            problems.append(f"{tag}: non-finite nuisance series")
        V, T = s.response.shape
        if s.nuisance.shape[1] != T:
            problems.append(
                f"{tag}: response has T={T} but nuisance has T={s.nuisance.shape[1]}"
            )
        if T < 2:
            problems.append(f"{tag}: T={T} < 2")
        if V < 2:
            problems.append(f"{tag}: V={V} < 2")
        shape = (s.confounders.shape[0], s.nuisance.shape[0], V)
        if ref is None:
            ref = shape
        elif shape != ref:
            problems.append(f"{tag}: (q, p, V)={shape} differs from cohort {ref}")
    if subjects:
        arms = {s.treatment for s in subjects}
        if 0 not in arms:
            problems.append("empty control arm")
        if 1 not in arms:
            problems.append("empty treated arm")
    return problems
