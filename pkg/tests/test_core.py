from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gammabound.core import (
    AteEstimate,
    Dataset,
    DatasetKind,
    RngSpec,
    SensitivityInterval,
    UnitRecord,
    as_gamma,
    concat,
    read_csv,
    restrict_support,
    split_by_study,
    validate_dataset,
    write_csv,
)
from gammabound.errors import EmptyDataset, EmptyResult, MissingStudyIndicator, SchemaError


def _rows():
    return [
        UnitRecord(x=(0.1, 1.0), t=1, y=2.0),
        UnitRecord(x=(0.2, 0.0), t=0, y=-1.0),
        UnitRecord(x=(0.3, 1.0), t=1, y=0.5),
    ]


def test_validate_identity():
    d = Dataset.from_records(_rows())
    assert validate_dataset(d) is d
    assert d.records == _rows()


def test_validate_rejects_bad_treatment():
    d = Dataset(x=np.zeros((2, 1)), t=np.array([0, 2]), y=np.zeros(2))
    with pytest.raises(SchemaError):
        validate_dataset(d)


def test_ragged_rows_rejected():
    rows = [UnitRecord(x=(1.0, 2.0), t=0, y=0.0), UnitRecord(x=(1.0, 2.0, 3.0), t=1, y=1.0)]
    with pytest.raises(SchemaError):
        Dataset.from_records(rows)


def test_non_finite_outcome_and_empty():
    with pytest.raises(SchemaError):
        validate_dataset(Dataset(x=np.zeros((1, 1)), t=[1], y=[np.nan]))
    with pytest.raises(EmptyDataset):
        validate_dataset(Dataset(x=np.zeros((0, 1)), t=np.zeros(0, int), y=np.zeros(0)))


def test_rct_needs_assignment_probability():
    d = Dataset(x=np.zeros((2, 1)), t=[0, 1], y=[0.0, 1.0], kind=DatasetKind.RCT)
    with pytest.raises(SchemaError):
        validate_dataset(d)
    assert validate_dataset(d.with_kind("rct", pi=0.5)).pi == 0.5


def test_dataset_is_immutable():
    d = Dataset.from_records(_rows())
    with pytest.raises(ValueError):
        d.y[0] = 3.0


def test_zero_covariates():
    d = Dataset(x=np.zeros((3, 0)), t=[0, 1, 1], y=[1.0, 2.0, 3.0])
    assert d.d == 0 and d.n == 3
    validate_dataset(d)


def _pooled(s):
    n = len(s)
    return Dataset(x=np.arange(n, dtype=float).reshape(n, 1), t=np.arange(n) % 2, y=np.arange(n, dtype=float), s=s)


def test_split_by_study_partition():
    rct, obs = split_by_study(_pooled([1, 0, 1, 0]), pi=0.5)
    assert rct.n == 2 and obs.n == 2
    assert rct.kind is DatasetKind.RCT and obs.kind is DatasetKind.OBS
    assert set(rct.x[:, 0]) == {0.0, 2.0}


def test_split_all_trial_leaves_empty_obs():
    rct, obs = split_by_study(_pooled([1, 1, 1, 1]))
    assert rct.n == 4 and obs.n == 0


def test_split_missing_indicator():
    rows = [UnitRecord(x=(0.0,), t=1, y=1.0, s=1), UnitRecord(x=(0.0,), t=0, y=1.0)]
    with pytest.raises(MissingStudyIndicator):
        Dataset.from_records(rows)
    with pytest.raises(MissingStudyIndicator):
        split_by_study(Dataset.from_records(rows[1:]))


@given(st.lists(st.integers(0, 1), min_size=1, max_size=30))
def test_split_then_repool_preserves_records(s):
    pooled = _pooled(s)
    rct, obs = split_by_study(pooled)
    back = concat([rct, obs])
    key = lambda d: sorted(zip(d.x[:, 0], d.t, d.y, d.s))
    assert key(back) == key(pooled)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_validate_idempotent(ys):
    d = Dataset(x=np.zeros((len(ys), 1)), t=np.ones(len(ys), int), y=ys)
    assert validate_dataset(validate_dataset(d)) is d


def test_restrict_support_fraction():
    gen = RngSpec(11).generator()
    n = 40000
    x = gen.uniform(-2, 2, n)
    d = Dataset(x=x.reshape(-1, 1), t=np.zeros(n, int), y=np.zeros(n))
    kept = restrict_support(d, [(-1.0, 1.0)]).n / n
    assert abs(kept - 0.5) <= 3 * np.sqrt(0.25 / n)


def test_restrict_support_identity_and_disjoint():
    d = Dataset(x=np.array([[-1.0], [0.0], [1.0]]), t=[0, 1, 0], y=[0.0, 0.0, 0.0])
    assert restrict_support(d, {"x0": (-1.0, 1.0)}).n == 3  # closed interval
    with pytest.raises(EmptyResult):
        restrict_support(d, [(5.0, 6.0)])
    with pytest.raises(ValueError):
        restrict_support(d, [(-np.inf, 0.0)])


def test_rng_spec_determinism_and_streams():
    a = RngSpec(7, "a").generator().random(5)
    b = RngSpec(7, "a").generator().random(5)
    c = RngSpec(7, "b").generator().random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError):
        RngSpec(-1)


def test_gamma_and_interval_invariants():
    assert as_gamma(1) == 1.0
    with pytest.raises(ValueError):
        as_gamma(0.99)
    with pytest.raises(ValueError):
        SensitivityInterval(2.0, 1.0, 0.0)
    iv = SensitivityInterval(2.0, 0.0, 1.0 - 1e-12)
    assert iv.contains(0.5) and not iv.contains(1.5)
    with pytest.raises(ValueError):
        AteEstimate(0.0, -1.0, "rct")


def test_csv_round_trip(tmp_path):
    gen = RngSpec(3).generator()
    n = 50
    d = Dataset(x=gen.normal(size=(n, 2)), t=gen.integers(0, 2, n), y=gen.normal(size=n),
                u=gen.uniform(size=(n, 1)), s=gen.integers(0, 2, n))
    p = tmp_path / "d.csv"
    write_csv(d, p)
    back = read_csv(p)
    assert np.array_equal(back.x, d.x) and np.array_equal(back.y, d.y)
    assert np.array_equal(back.u, d.u) and np.array_equal(back.s, d.s)
    p2 = tmp_path / "d2.csv"
    write_csv(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_csv_schema_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,y,x0\n1,2.0\n")
    with pytest.raises(SchemaError):
        read_csv(p)
    p.write_text("t,y,x0\n2,2.0,1.0\n")
    with pytest.raises(SchemaError):
        read_csv(p)
    p.write_text("t,y,x1\n1,2.0,1.0\n")
    with pytest.raises(SchemaError):
        read_csv(p)
