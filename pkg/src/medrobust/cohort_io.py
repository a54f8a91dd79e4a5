"""Reading and writing cohorts and influence matrices as plain text tables.

Cohort layout::

    subjects.csv          id,A,M,W1,...,Wq
    ts/<id>_X.csv         T rows, header X1..XV
    ts/<id>_H.csv         T rows, header H1..Hp

Floats are written with 17 significant digits so a write/read cycle is exact.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np

from .data import CohortDataset, PairIndex, SubjectRecord


class CohortFormatError(ValueError):
    """Malformed input; the message names the file (and line when known)."""


def _f(x) -> str:
    return f"{float(x):.17g}"


def write_cohort(dataset: CohortDataset, root) -> None:
    root = Path(root)
    (root / "ts").mkdir(parents=True, exist_ok=True)
    q = dataset.dims[1]
    with open(root / "subjects.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "A", "M"] + [f"W{k + 1}" for k in range(q)])
        for s in dataset.subjects:
            w.writerow([s.id, int(s.treatment), _f(s.mediator)] + [_f(v) for v in s.confounders])
    for s in dataset.subjects:
        _write_series(root / "ts" / f"{s.id}_X.csv", "X", s.response)
        _write_series(root / "ts" / f"{s.id}_H.csv", "H", s.nuisance)


def _write_series(path, prefix, arr) -> None:
    arr = np.asarray(arr, float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"{prefix}{k + 1}" for k in range(arr.shape[0])])
        for row in arr.T:
            w.writerow([_f(v) for v in row])


def _parse_float(text, path, line, what) -> float:
    try:
        return float(text)
    except ValueError:
        raise CohortFormatError(f"{path}:{line}: cannot parse {what} {text!r}") from None


def _read_series(path: Path, prefix: str, subject_id: str) -> np.ndarray:
    if not path.is_file():
        raise CohortFormatError(f"missing {prefix} series for subject {subject_id}: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CohortFormatError(f"{path}:1: empty file")
    header = rows[0]
    expected = [f"{prefix}{k + 1}" for k in range(len(header))]
    if header != expected:
        raise CohortFormatError(f"{path}:1: header must be {','.join(expected)}")
    out = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise CohortFormatError(f"{path}:{i + 2}: expected {len(header)} fields, got {len(row)}")
        out[i] = [_parse_float(v, path, i + 2, "value") for v in row]
    return out.T


def read_cohort(root) -> CohortDataset:
    root = Path(root)
    path = root / "subjects.csv"
    if not path.is_file():
        raise CohortFormatError(f"missing {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CohortFormatError(f"{path}:1: empty file")
    header = rows[0]
    q = len(header) - 3
    expected = ["id", "A", "M"] + [f"W{k + 1}" for k in range(q)]
    if q < 1 or header != expected:
        raise CohortFormatError(f"{path}:1: header must be id,A,M,W1,...,Wq")
    subjects, seen = [], set()
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise CohortFormatError(f"{path}:{i}: expected {len(header)} fields, got {len(row)}")
        sid = row[0]
        if not sid or sid in seen or os.sep in sid:
            raise CohortFormatError(f"{path}:{i}: bad or duplicate subject id {sid!r}")
        seen.add(sid)
        if row[1] not in ("0", "1"):
            raise CohortFormatError(f"{path}:{i}: treatment must be 0 or 1, got {row[1]!r}")
        m = _parse_float(row[2], path, i, "M")
        w = [_parse_float(v, path, i, "W") for v in row[3:]]
        X = _read_series(root / "ts" / f"{sid}_X.csv", "X", sid)
        H = _read_series(root / "ts" / f"{sid}_H.csv", "H", sid)
        if X.shape[1] != H.shape[1]:
            raise CohortFormatError(f"subject {sid}: X has T={X.shape[1]} rows but H has T={H.shape[1]}")
        subjects.append(SubjectRecord(sid, int(row[1]), np.array(w), m, X, H))
    if not subjects:
        raise CohortFormatError(f"{path}: no subjects")
    return CohortDataset(tuple(subjects))


# --------------------------------------------------------------------------
# influence matrices


INFLUENCE_FIXED = ("outcome", "v", "v_prime", "estimate")


def write_influence(path, values, estimate, pairs, ids) -> None:
    """One row per outcome: outcome label, region pair, estimate, then n values."""
    values = np.asarray(values, float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(list(INFLUENCE_FIXED) + [str(i) for i in ids])
        for j, p in enumerate(pairs):
            w.writerow([p.label, p.v, p.v_prime, _f(estimate[j])] + [_f(v) for v in values[:, j]])


def read_influence(path):
    """Return ``(infl n x J, estimate J, pairs, ids)``."""
    path = Path(path)
    if not path.is_file():
        raise CohortFormatError(f"missing influence file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if len(rows) < 2:
        raise CohortFormatError(f"{path}: needs a header and at least one outcome row")
    header = rows[0]
    if tuple(header[:4]) != INFLUENCE_FIXED or len(header) < 6:
        raise CohortFormatError(f"{path}:1: header must start with {', '.join(INFLUENCE_FIXED)}"
                                " followed by at least two subject ids")
    ids = header[4:]
    n = len(ids)
    infl = np.empty((n, len(rows) - 1))
    est = np.empty(len(rows) - 1)
    pairs = []
    for j, row in enumerate(rows[1:]):
        line = j + 2
        if len(row) != len(header):
            raise CohortFormatError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        try:
            v, vp = int(row[1]), int(row[2])
        except ValueError:
            raise CohortFormatError(f"{path}:{line}: region indices must be integers") from None
        pairs.append(PairIndex(j, v, vp))
        est[j] = _parse_float(row[3], path, line, "estimate")
        infl[:, j] = [_parse_float(x, path, line, "influence value") for x in row[4:]]
    if not np.all(np.isfinite(infl)):
        raise CohortFormatError(f"{path}: influence values must be finite")
    return infl, est, pairs, ids
