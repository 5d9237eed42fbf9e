import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdtree import Dataset, honest_split, load_dataset, restrict_bandwidth, write_dataset
from rdtree.data import BINARY, CONTINUOUS, SampleSplit
from rdtree.errors import (
    ArgumentError,
    ParseError,
    SchemaError,
    SplitError,
    SupportError,
    ValidationError,
)


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


CSV4 = "y,x,z1,z2\n1.5,0.2,1,0.3\n-0.5,-0.4,0,1.7\n2.0,0.9,1,-2.2\n0.1,-0.1,0,0.0\n"


def test_load_four_rows(tmp_path):
    d = load_dataset(_write(tmp_path, CSV4), cutoff=0.0)
    assert (d.n, d.k, d.design) == (4, 2, "sharp")
    assert d.feature_names == ("z1", "z2")
    assert d.feature_kinds == (BINARY, CONTINUOUS)
    np.testing.assert_array_equal(d.y, [1.5, -0.5, 2.0, 0.1])


def test_missing_t_column(tmp_path):
    with pytest.raises(SchemaError, match="missing column t"):
        load_dataset(_write(tmp_path, CSV4), {"t": "t"}, design="fuzzy")


def test_kind_override(tmp_path):
    d = load_dataset(_write(tmp_path, CSV4), {"kinds": {"z1": CONTINUOUS}})
    assert d.feature_kinds[0] == CONTINUOUS


def test_parse_error_names_row(tmp_path):
    bad = CSV4.replace("2.0,0.9", "abc,0.9")
    with pytest.raises(ParseError, match="row 4"):
        load_dataset(_write(tmp_path, bad))


def test_missing_value_rejected(tmp_path):
    with pytest.raises(ParseError):
        load_dataset(_write(tmp_path, CSV4.replace("1.5,0.2", ",0.2")))


def test_fuzzy_takeup_validation(tmp_path):
    text = "y,x,t,z1\n1,0.5,1,0\n0,-0.5,0,1\n2,0.3,2,1\n"
    with pytest.raises(ValidationError):
        load_dataset(_write(tmp_path, text), design="fuzzy")


def test_one_sided_support():
    with pytest.raises(SupportError):
        Dataset(y=[1, 2], x=[0.1, 0.2], z=[[0], [1]], cutoff=0.0)


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    n = 40
    d = Dataset(
        y=rng.normal(size=n),
        x=rng.uniform(-1, 1, n),
        z=np.column_stack([rng.integers(0, 2, n), rng.normal(size=n)]),
        cutoff=0.0,
        design="fuzzy",
        t=rng.integers(0, 2, n),
        cluster=rng.integers(0, 5, n),
    )
    p = tmp_path / "out.csv"
    write_dataset(d, p)
    back = load_dataset(p, {"t": "t", "cluster": "cluster"}, design="fuzzy")
    for a, b in ((d.y, back.y), (d.x, back.x), (d.z, back.z), (d.t, back.t), (d.cluster, back.cluster)):
        np.testing.assert_array_equal(a, b)
    write_dataset(back, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_text() == p.read_text()


def test_split_example():
    s = honest_split(100, 0.5, seed=7)
    assert len(s.train) == 50 and len(s.est) == 50
    assert not set(s.train) & set(s.est)
    s2 = honest_split(100, 0.5, seed=7)
    np.testing.assert_array_equal(s.train, s2.train)
    assert isinstance(s, SampleSplit)


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1, 1.5])
def test_split_bad_fraction(fraction):
    with pytest.raises(ArgumentError):
        honest_split(10, fraction)


def test_split_empty_side():
    with pytest.raises(SplitError):
        honest_split(1, 0.5)


@given(n=st.integers(2, 500), frac=st.floats(0.05, 0.95), seed=st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_split_partitions(n, frac, seed):
    try:
        s = honest_split(n, frac, seed)
    except SplitError:
        return
    assert len(s.train) + len(s.est) == n
    assert np.union1d(s.train, s.est).tolist() == list(range(n))
    assert len(s.train) == int(np.floor(frac * n + 0.5))


def _uniform(n=200, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(y=rng.normal(size=n), x=rng.uniform(-1, 1, n), z=rng.normal(size=(n, 2)), cutoff=0.0)


def test_bandwidth_window():
    d = _uniform()
    r = restrict_bandwidth(d, 0.1)
    assert np.all(np.abs(r.x) <= 0.1)
    assert r.n == int(np.sum(np.abs(d.x) <= 0.1))
    assert restrict_bandwidth(d, np.inf) is d


def test_bandwidth_errors():
    d = _uniform()
    with pytest.raises(ArgumentError):
        restrict_bandwidth(d, 0.0)
    far = Dataset(y=[1, 2, 3], x=[0.2, 0.2, -0.9], z=[[0], [1], [0]], cutoff=0.0)
    with pytest.raises(SupportError):
        restrict_bandwidth(far, 0.05)


@given(h=st.floats(0.05, 2.0))
@settings(max_examples=30, deadline=None)
def test_bandwidth_idempotent(h):
    d = _uniform(seed=5)
    once = restrict_bandwidth(d, h)
    twice = restrict_bandwidth(once, h)
    np.testing.assert_array_equal(once.x, twice.x)
    np.testing.assert_array_equal(once.y, twice.y)
