import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freshivf.centroid_index import CentroidIndex
from freshivf.core import ConflictError, FormatError, NotFoundError, brute_force_knn, sq_distances


def test_single_centroid_found():
    ci = CentroidIndex(2)
    ci.add_centroid(7, (1, 1))
    assert [p for p, _ in ci.search_centroids(np.array([1.0, 1.0]), 1)] == [7]


def test_duplicate_and_unknown():
    ci = CentroidIndex(2)
    ci.add_centroid(7, (0, 0))
    with pytest.raises(ConflictError):
        ci.add_centroid(7, (1, 1))
    with pytest.raises(NotFoundError):
        ci.remove_centroid(9)
    ci.remove_centroid(7)
    with pytest.raises(NotFoundError):
        ci.remove_centroid(7)
    assert ci.search_centroids(np.zeros(2), 1) == []


def test_examples_with_distances():
    ci = CentroidIndex(2)
    ci.add_centroid(1, (0, 0))
    ci.add_centroid(2, (10, 0))
    assert ci.search_centroids(np.array([1.0, 0.0]), 1) == [(1, 1.0)]
    assert [p for p, _ in ci.search_centroids(np.array([5.0, 0.0]), 2)] == [1, 2]


def test_remove_subset(rng):
    ci = CentroidIndex(3)
    for i in range(1, 11):
        ci.add_centroid(i, rng.normal(size=3))
    ci.remove_centroid(2)
    ci.remove_centroid(4)
    got = [p for p, _ in ci.search_centroids(np.zeros(3), 10)]
    assert len(got) == 8 and 2 not in got and 4 not in got


@pytest.mark.parametrize("n,k", [(100, 8), (500, 64)])
def test_matches_brute_force(rng, n, k):
    ci = CentroidIndex(8)
    C = {int(i): rng.normal(size=8) for i in rng.permutation(4 * n)[:n]}
    for p, c in C.items():
        ci.add_centroid(p, c)
    for q in rng.normal(size=(25, 8)):
        assert [p for p, _ in ci.search_centroids(q, k)] == brute_force_knn(C, q, k)


def test_exclude():
    ci = CentroidIndex(1)
    for i in range(5):
        ci.add_centroid(i, (i,))
    assert [p for p, _ in ci.search_centroids(np.array([0.0]), 2, exclude=[0, 1])] == [2, 3]


def test_atomic_update_publishes_together():
    ci = CentroidIndex(1)
    ci.add_centroid(0, (0,))
    ci.update(remove=[0], add=[(1, (1,)), (2, (2,))])
    assert ci.live_ids == [1, 2]
    with pytest.raises(ConflictError):
        ci.update(remove=[1], add=[(2, (5,))])
    assert ci.live_ids == [1, 2]  # failed update changed nothing


def test_readers_never_see_neither_generation():
    """Concurrent splits swap one centroid for two; a reader must always see one side."""
    ci = CentroidIndex(2)
    ci.add_centroid(0, (0, 0))
    stop = threading.Event()
    bad = []

    def reader():
        while not stop.is_set():
            ids = set(ci.live_ids)
            if not ids:
                bad.append("empty")

    threads = [threading.Thread(target=reader) for _ in range(2)]
    for t in threads:
        t.start()
    live = [0]
    nxt = 1
    for _ in range(300):
        old = live.pop(0)
        ci.update(remove=[old], add=[(nxt, (nxt, 0)), (nxt + 1, (0, nxt))])
        live += [nxt, nxt + 1]
        nxt += 2
    stop.set()
    for t in threads:
        t.join()
    assert not bad


def test_snapshot_round_trip(rng):
    ci = CentroidIndex(4)
    for i in range(40):
        ci.add_centroid(i, rng.normal(size=4))
    for i in range(0, 40, 3):
        ci.remove_centroid(i)
    back = CentroidIndex.restore_centroids(ci.snapshot_centroids())
    for q in rng.normal(size=(100, 4)):
        assert back.search_centroids(q, 8) == ci.search_centroids(q, 8)
    # a removed id can be re-added after restore
    back.add_centroid(0, np.zeros(4))


def test_empty_snapshot():
    back = CentroidIndex.restore_centroids(CentroidIndex(3).snapshot_centroids(), dim=3)
    assert len(back) == 0 and back.search_centroids(np.zeros(3), 1) == []


def test_snapshot_layout():
    ci = CentroidIndex(2)
    ci.add_centroid(5, (1.5, -2))
    data = ci.snapshot_centroids()
    assert data[:4] == b"CIDX"
    # magic + version + count + (id, live, dim, 2 doubles) + crc
    assert len(data) == 4 + 4 + 8 + (8 + 1 + 4 + 16) + 4


@pytest.mark.parametrize("mutate", [lambda d: d[:-7], lambda d: b"XXXX" + d[4:],
                                    lambda d: d[:10] + bytes([d[10] ^ 1]) + d[11:]])
def test_corrupt_snapshot(mutate):
    ci = CentroidIndex(2)
    ci.add_centroid(1, (0, 0))
    with pytest.raises(FormatError):
        CentroidIndex.restore_centroids(mutate(ci.snapshot_centroids()))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 15)), max_size=60), st.integers(0, 2 ** 31))
def test_random_ops_match_oracle(ops, seed):
    rng = np.random.default_rng(seed)
    ci = CentroidIndex(3)
    oracle = {}
    for add, pid in ops:
        if add and pid not in oracle:
            oracle[pid] = rng.normal(size=3)
            ci.add_centroid(pid, oracle[pid])
        elif not add and pid in oracle:
            del oracle[pid]
            ci.remove_centroid(pid)
    q = rng.normal(size=3)
    got = ci.search_centroids(q, 5)
    if oracle:
        assert [p for p, _ in got] == brute_force_knn(oracle, q, min(5, len(oracle)))
        assert [d for _, d in got] == sorted(float(sq_distances(oracle[p][None, :], q)[0]) for p, _ in got)
    else:
        assert got == []
