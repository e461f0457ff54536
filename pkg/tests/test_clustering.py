import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from freshivf.clustering import balance_slack, balanced_split, hierarchical_partition
from freshivf.core import InvalidArgumentError


def test_two_entries():
    X = np.array([[0.0, 0.0], [4.0, 2.0]])
    res = balanced_split([10, 11], X)
    assert len(res.members1) == len(res.members2) == 1
    got = {tuple(res.centroid1), tuple(res.centroid2)}
    assert got == {(0.0, 0.0), (4.0, 2.0)}


def test_needs_two():
    with pytest.raises(InvalidArgumentError):
        balanced_split([1], np.zeros((1, 3)))


def test_separated_blobs(rng):
    n = 40
    X = np.vstack([rng.normal(size=(n, 4)), rng.normal(size=(n, 4)) + 50])
    res = balanced_split(np.arange(2 * n), X)
    parts = sorted([sorted(res.members1.tolist()), sorted(res.members2.tolist())])
    assert parts == [list(range(n)), list(range(n, 2 * n))]


def test_collinear_sizes():
    X = np.arange(33, dtype=float)[:, None] * np.array([[1.0, 2.0]])
    res = balanced_split(np.arange(33), X)
    assert sorted([len(res.members1), len(res.members2)]) == [16, 17]
    # contiguous halves along the line
    a = np.sort(res.members1)
    assert np.all(np.diff(a) == 1)


def test_skewed_input_still_balanced(rng):
    X = np.vstack([rng.normal(size=(90, 3)), rng.normal(size=(10, 3)) + 30])
    res = balanced_split(np.arange(100), X)
    assert abs(len(res.members1) - len(res.members2)) <= balance_slack(100)


def test_deterministic(rng):
    X = rng.normal(size=(64, 5))
    a = balanced_split(np.arange(64), X)
    b = balanced_split(np.arange(64), X.copy())
    assert np.array_equal(a.members1, b.members1)
    assert np.array_equal(a.centroid2, b.centroid2)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 60), st.integers(1, 4)),
              elements=st.floats(-100, 100, allow_nan=False)))
def test_partition_properties(X):
    n = len(X)
    res = balanced_split(np.arange(n), X)
    m1, m2 = res.members1, res.members2
    assert len(m1) >= 1 and len(m2) >= 1
    assert sorted(np.concatenate([m1, m2]).tolist()) == list(range(n))
    assert abs(len(m1) - len(m2)) <= balance_slack(n)
    assert np.allclose(res.centroid1, X[m1].mean(axis=0))
    assert np.allclose(res.centroid2, X[m2].mean(axis=0))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 400), st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_hierarchical_leaves(n, limit, seed):
    X = np.random.default_rng(seed).normal(size=(n, 3))
    leaves = hierarchical_partition(np.arange(n), X, limit)
    assert all(1 <= len(p) <= limit for p in leaves)
    assert sorted(np.concatenate(leaves).tolist()) == list(range(n))


def test_hierarchical_identical_points():
    leaves = hierarchical_partition(np.arange(50), np.ones((50, 2)), 8)
    assert all(len(p) <= 8 for p in leaves)
