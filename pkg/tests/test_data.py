import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from medrobust.data import (
    CohortDataset,
    DerivedOutcomeMatrix,
    DimensionError,
    SubjectRecord,
    n_pairs,
    pair_index,
    pair_to_j,
    validate_cohort,
)


def _subject(sid, a, m=0.5, T=20, V=3, p=3, q=2):
    rng = np.random.default_rng(abs(hash(sid)) % 2**32)
    return SubjectRecord(sid, a, rng.normal(size=q), m, rng.normal(size=(V, T)), rng.normal(size=(p, T)))


def test_pair_index_small_cases():
    assert [(p.v, p.v_prime) for p in pair_index(3)] == [(1, 2), (1, 3), (2, 3)]
    assert [(p.v, p.v_prime) for p in pair_index(2)] == [(1, 2)]
    assert len(pair_index(100)) == 4950 == n_pairs(100)
    with pytest.raises(DimensionError):
        pair_index(1)


@given(st.integers(min_value=2, max_value=50))
def test_pair_index_is_a_bijection(V):
    pairs = pair_index(V)
    assert [p.j for p in pairs] == list(range(len(pairs)))
    for p in pairs:
        assert pair_to_j(p.v, p.v_prime, V) == p.j


def test_subject_arrays_are_read_only():
    s = _subject("a", 1)
    with pytest.raises(ValueError):
        s.response[0, 0] = 1.0
    assert s.with_usable(False).usable is False and s.usable is True


def test_validate_cohort_reports():
    good = CohortDataset((_subject("a", 0), _subject("b", 1)))
    assert validate_cohort(good) == []
    assert validate_cohort(good) == []  # idempotent

    treated = CohortDataset((_subject("a", 1), _subject("b", 1)))
    assert "empty control arm" in validate_cohort(treated)

    bad = CohortDataset((_subject("a", 0), _subject("nanm", 1, m=np.nan)))
    msgs = validate_cohort(bad)
    assert any("nanm" in m and "mediator" in m for m in msgs)

    mixed = CohortDataset((_subject("a", 0), _subject("b", 1, V=4)))
    assert any("differs" in m for m in validate_cohort(mixed))


def test_cohort_dims_and_accessors():
    c = CohortDataset((_subject("a", 0), _subject("b", 1), _subject("c", 1)))
    assert c.dims == (3, 2, 3, 3, 20)
    np.testing.assert_array_equal(c.treatment, [0, 1, 1])
    assert c.ids == ["a", "b", "c"]


def test_derived_outcome_matrix_checks():
    pairs = pair_index(3)
    DerivedOutcomeMatrix(np.zeros((4, 3)), pairs)
    with pytest.raises(DimensionError):
        DerivedOutcomeMatrix(np.zeros((4, 2)), pairs)
    with pytest.raises(ValueError):
        DerivedOutcomeMatrix(np.full((4, 3), np.inf), pairs)
