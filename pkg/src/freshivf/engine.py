"""Updatable cluster index: foreground updater plus background local rebuilder.

Foreground calls (insert, delete, search) only touch the postings they need
and push split / merge / reassign jobs onto a queue. Background workers, or
:meth:`LireEngine.drain_background` in deterministic mode, execute the jobs.
"""

from __future__ import annotations

import logging
import struct
import threading
import zlib
from collections import Counter, deque
from contextlib import ExitStack, contextmanager
from queue import Queue
from typing import NamedTuple

import numpy as np

from .centroid_index import CentroidIndex
from .clustering import balanced_split, hierarchical_partition
from .core import (
    DELETED_BIT,
    ConflictError,
    FormatError,
    IndexConfig,
    InvalidArgumentError,
    InvalidStateError,
    NotFoundError,
    as_vector,
    next_version,
    nearest_rows,
    sq_distances,
)
from .storage import BlockDevice, PostingStore, make_entries

log = logging.getLogger(__name__)

MODES = ("lire", "split_only", "append_only")
MAX_PLACEMENT_RETRIES = 64


class SplitJob(NamedTuple):
    posting_id: int


class MergeJob(NamedTuple):
    posting_id: int


class ReassignJob(NamedTuple):
    vector_id: int
    vector: np.ndarray
    observed_version: int
    source: int | None = None


class ReassignCandidate(NamedTuple):
    vector_id: int
    vector: np.ndarray
    observed_version: int
    source: int


class SearchResult(NamedTuple):
    ids: list[int]
    distances: list[float]
    postings_scanned: int = 0
    block_reads: int = 0


class VersionMap:
    """Per-vector version byte: 7-bit reassign counter, high bit tombstone."""

    MAGIC = b"VMAP"

    def __init__(self):
        self._v: dict[int, int] = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._v)

    def __contains__(self, vid):
        return vid in self._v

    def get(self, vid):
        return self._v.get(vid)

    def is_live(self, vid) -> bool:
        b = self._v.get(vid)
        return b is not None and not b & DELETED_BIT

    def live_ids(self) -> list[int]:
        return [i for i, b in list(self._v.items()) if not b & DELETED_BIT]

    def register(self, vid: int) -> int:
        with self._lock:
            if vid in self._v:
                raise ConflictError(f"vector id {vid} already used")
            self._v[vid] = 0
            return 0

    def compare_and_swap(self, vid: int, expected: int, new: int) -> bool:
        with self._lock:
            if self._v.get(vid) != expected:
                return False
            self._v[vid] = new
            return True

    def delete(self, vid: int) -> None:
        while True:
            cur = self._v.get(vid)
            if cur is None or cur & DELETED_BIT:
                raise NotFoundError(f"vector {vid} is not live")
            if self.compare_and_swap(vid, cur, cur | DELETED_BIT):
                return

    def live_mask(self, ids: np.ndarray, versions: np.ndarray) -> np.ndarray:
        get = self._v.get
        return np.fromiter((get(i) == v for i, v in zip(ids.tolist(), versions.tolist())),
                           dtype=bool, count=len(ids))

    def snapshot(self) -> bytes:
        with self._lock:
            items = sorted(self._v.items())
        body = bytearray(self.MAGIC)
        body += struct.pack("<IQ", 1, len(items))
        if items:
            arr = np.array(items, dtype=np.uint64)
            rec = np.empty(len(items), dtype=[("id", "<u8"), ("v", "u1")])
            rec["id"], rec["v"] = arr[:, 0], arr[:, 1]
            body += rec.tobytes()
        body += struct.pack("<I", zlib.crc32(body))
        return bytes(body)

    @classmethod
    def restore(cls, data: bytes) -> "VersionMap":
        if len(data) < 20 or data[:4] != cls.MAGIC:
            raise FormatError("not a version-map snapshot")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise FormatError("version-map snapshot checksum mismatch")
        _, n = struct.unpack_from("<IQ", body, 4)
        if len(body) != 16 + 9 * n:
            raise FormatError("version-map snapshot has the wrong length")
        rec = np.frombuffer(body, dtype=[("id", "<u8"), ("v", "u1")], count=n, offset=16)
        vm = cls()
        vm._v = dict(zip(rec["id"].tolist(), rec["v"].tolist()))
        return vm


class _Holders:
    """In-memory map from vector id to the postings holding any copy of it.

    Lets a delete or a reassignment point the rebuilder at the postings it
    thinned without touching the disk.
    """

    def __init__(self):
        self._by_vec: dict[int, set[int]] = {}
        self._by_post: dict[int, list[int]] = {}
        self._lock = threading.Lock()

    def add(self, pid: int, ids) -> None:
        ids = [int(i) for i in ids]
        with self._lock:
            self._by_post.setdefault(pid, []).extend(ids)
            for i in ids:
                self._by_vec.setdefault(i, set()).add(pid)

    def drop(self, pid: int) -> None:
        with self._lock:
            for i in self._by_post.pop(pid, ()):
                held = self._by_vec.get(i)
                if held is not None:
                    held.discard(pid)
                    if not held:
                        del self._by_vec[i]

    def replace(self, pid: int, ids) -> None:
        self.drop(pid)
        self.add(pid, ids)

    def of(self, vid: int) -> list[int]:
        with self._lock:
            return sorted(self._by_vec.get(vid, ()))


class _Gate:
    """Shared/exclusive gate; exclusive holders wait for shared ones to leave."""

    def __init__(self):
        self._cond = threading.Condition()
        self._shared = 0
        self._exclusive = False

    @contextmanager
    def shared(self):
        with self._cond:
            while self._exclusive:
                self._cond.wait()
            self._shared += 1
        try:
            yield
        finally:
            with self._cond:
                self._shared -= 1
                if not self._shared:
                    self._cond.notify_all()

    @contextmanager
    def exclusive(self):
        with self._cond:
            while self._exclusive:
                self._cond.wait()
            self._exclusive = True
            while self._shared:
                self._cond.wait()
        try:
            yield
        finally:
            with self._cond:
                self._exclusive = False
                self._cond.notify_all()


class LireEngine:
    """Cluster-based vector index maintained by local split/merge/reassign.

    ``mode`` selects which rebuild operators run: ``"lire"`` (all),
    ``"split_only"`` (no reassignment) or ``"append_only"`` (no rebuild jobs
    at all). With ``cfg.deterministic`` jobs queue up until
    :meth:`drain_background`; otherwise ``cfg.background_workers`` threads
    consume them as they arrive.
    """

    def __init__(self, cfg: IndexConfig, device: BlockDevice | None = None, mode: str = "lire",
                 store: PostingStore | None = None, centroids: CentroidIndex | None = None,
                 versions: VersionMap | None = None, next_posting_id: int = 0,
                 defer_release: bool = False):
        if mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}")
        self.cfg = cfg
        self.mode = mode
        if store is None:
            device = device or BlockDevice(cfg.block_size, cfg.block_count)
            store = PostingStore(device, cfg.dim, cfg.element_type, defer_release=defer_release)
        self.store = store
        self.device = store.device
        self.centroids = centroids if centroids is not None else CentroidIndex(cfg.dim)
        self.versions = versions if versions is not None else VersionMap()
        self._next_pid = next_posting_id
        self._pid_lock = threading.Lock()
        self._posting_locks: dict[int, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._bootstrap_lock = threading.Lock()
        self._stats: Counter = Counter()
        self._stats_lock = threading.Lock()
        self._pending: set = set()
        self._pending_lock = threading.Lock()
        self.fg_gate = _Gate()
        self.bg_gate = _Gate()
        self.touched: set[int] = set()
        self.move_log: list | None = None
        self._jobs: deque = deque()
        self._queue: Queue | None = None
        self._workers: list[threading.Thread] = []
        self.holders = _Holders()
        pids = store.posting_ids()
        for pid, entries in zip(pids, store.parallel_get(pids, missing="skip")):
            if entries is not None:
                self.holders.add(pid, entries["id"])
        if not cfg.deterministic:
            self.start_workers(cfg.background_workers)

    def start_workers(self, n: int) -> None:
        """Switch to threaded background execution; queued jobs move over."""
        if self._queue is not None:
            raise InvalidStateError("background workers already running")
        self._queue = Queue()
        while self._jobs:
            self._queue.put(self._jobs.popleft())
        for i in range(n):
            t = threading.Thread(target=self._worker_loop, name=f"rebuilder-{i}", daemon=True)
            t.start()
            self._workers.append(t)

    @property
    def split_enabled(self):
        return self.mode != "append_only"

    @property
    def merge_enabled(self):
        return self.mode != "append_only"

    @property
    def reassign_enabled(self):
        return self.mode == "lire"

    # -- construction

    @classmethod
    def build(cls, ids, vectors, cfg: IndexConfig, **kwargs) -> "LireEngine":
        """Build a balanced index over a static dataset.

        Hierarchical balanced bisection down to ``split_limit`` points, then
        every vector is placed with :meth:`assign_replicas` semantics. Any
        posting that the placement (replicas included) pushes over the limit
        is bisected again until all postings fit.
        """
        ids = np.asarray(ids, dtype=np.uint64)
        X = np.asarray(vectors).reshape(len(ids), cfg.dim).astype(cfg.dtype, copy=False)
        if len(ids) == 0:
            raise InvalidArgumentError("cannot build an index over an empty dataset")
        if len(np.unique(ids)) != len(ids):
            raise InvalidArgumentError("duplicate vector ids")
        engine = cls(cfg, **kwargs)
        Xf = X.astype(np.float64)
        cents = [Xf[pos].mean(axis=0) for pos in hierarchical_partition(ids, Xf, cfg.split_limit)]
        for _ in range(64):
            C = np.stack(cents)
            rows, cols, rank = _replica_placement(Xf, C, cfg)
            counts = np.bincount(cols, minlength=len(C))
            progressed = False
            for j in np.flatnonzero(counts > cfg.split_limit):
                pos = rows[cols == j]
                if np.all(Xf[pos] == Xf[pos[0]]):
                    continue
                res = balanced_split(ids[pos], Xf[pos])
                cents[j] = res.centroid1
                cents.append(res.centroid2)
                progressed = True
            if not progressed:
                break
        # degenerate leftovers (piles of identical vectors): primaries first, then nearest replicas
        keep = np.ones(len(rows), dtype=bool)
        for j in np.flatnonzero(np.bincount(cols, minlength=len(C)) > cfg.split_limit):
            at = np.flatnonzero(cols == j)
            at = at[np.lexsort((rows[at], rank[at] > 0))]
            drop = at[cfg.split_limit:]
            keep[drop[rank[drop] > 0]] = False
        rows, cols = rows[keep], cols[keep]
        # a centroid nobody chose is nobody's nearest, so dropping it changes no placement
        used = np.flatnonzero(np.bincount(cols, minlength=len(C)))
        for pid, j in enumerate(used):
            mem = np.sort(rows[cols == j])
            engine._put(pid, make_entries(ids[mem], 0, X[mem], cfg.dim, cfg.element_type))
        engine.centroids.update(add=list(enumerate(C[used])))
        for vid in ids.tolist():
            engine.versions.register(vid)
        engine._next_pid = len(used)
        return engine

    def close(self):
        if self._queue is not None:
            for _ in self._workers:
                self._queue.put(None)
            for t in self._workers:
                t.join()
            self._workers = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- bookkeeping

    def _bump(self, key: str, n: int = 1):
        with self._stats_lock:
            self._stats[key] += n

    def counters(self) -> dict[str, int]:
        with self._stats_lock:
            out = dict(self._stats)
        out.update(self.device.counters())
        out["live_postings"] = len(self.centroids)
        return out

    def _new_posting_id(self) -> int:
        with self._pid_lock:
            pid = self._next_pid
            self._next_pid += 1
            return pid

    @property
    def next_posting_id(self) -> int:
        return self._next_pid

    def _lock_for(self, pid: int) -> threading.Lock:
        with self._locks_guard:
            lk = self._posting_locks.get(pid)
            if lk is None:
                lk = self._posting_locks[pid] = threading.Lock()
            return lk

    @contextmanager
    def _locked(self, *pids):
        with ExitStack() as stack:
            for p in sorted(set(pids)):
                stack.enter_context(self._lock_for(p))
            yield

    def _live(self, entries: np.ndarray) -> np.ndarray:
        """Entries whose version matches the version map, one per vector id."""
        if len(entries) == 0:
            return entries
        live = entries[self.versions.live_mask(entries["id"], entries["version"])]
        if len(live) > 1:
            _, first = np.unique(live["id"], return_index=True)
            if len(first) != len(live):
                live = live[np.sort(first)]
        return live

    def _put(self, pid: int, entries: np.ndarray) -> None:
        self.store.put(pid, entries)
        self.holders.replace(pid, entries["id"])

    def _append(self, pid: int, entries: np.ndarray) -> int:
        n = self.store.append(pid, entries)
        self.holders.add(pid, entries["id"])
        return n

    def _delete_posting(self, pid: int) -> None:
        self.store.delete_posting(pid)
        self.holders.drop(pid)

    def _thinned(self, vid: int, keep=()) -> None:
        """A copy of ``vid`` went stale: have its postings checked for merging."""
        if not self.merge_enabled:
            return
        for pid in self.holders.of(vid):
            if pid not in keep:
                self._enqueue(MergeJob(pid))

    # -- job pipeline

    def _enqueue(self, job) -> None:
        if isinstance(job, (SplitJob, MergeJob)):
            key = (type(job).__name__, job.posting_id)
            with self._pending_lock:
                if key in self._pending:
                    return
                self._pending.add(key)
        self._bump("jobs_enqueued")
        if self._queue is None:
            self._jobs.append(job)
        else:
            self._queue.put(job)

    def pending_jobs(self) -> int:
        return len(self._jobs) if self._queue is None else self._queue.qsize()

    def _run_job(self, job) -> None:
        if isinstance(job, (SplitJob, MergeJob)):
            with self._pending_lock:
                self._pending.discard((type(job).__name__, job.posting_id))
        with self.bg_gate.shared():
            self._bump("jobs_executed")
            if isinstance(job, SplitJob):
                self.split(job.posting_id)
            elif isinstance(job, MergeJob):
                self.merge(job.posting_id)
            else:
                self.reassign(job.vector_id, job.vector, job.observed_version, job.source)

    def _worker_loop(self):
        while True:
            job = self._queue.get()
            try:
                if job is None:
                    return
                self._run_job(job)
            except Exception:
                log.exception("rebuild job %r failed", job)
                self._bump("job_errors")
            finally:
                self._queue.task_done()

    def drain_background(self, max_jobs: int | None = None) -> int:
        """Block until every queued job, including cascades, has finished.

        Returns the number of jobs executed by this call in deterministic
        mode. ``max_jobs`` turns a runaway cascade into an error.
        """
        if self._queue is not None:
            self._queue.join()
            return 0
        done = 0
        while self._jobs:
            if max_jobs is not None and done >= max_jobs:
                raise InvalidStateError(f"background work did not settle within {max_jobs} jobs")
            self._run_job(self._jobs.popleft())
            done += 1
        return done

    @contextmanager
    def quiesce(self):
        """Hold off foreground updates and background jobs with the queue drained."""
        with self.fg_gate.exclusive():
            self.drain_background()
            with self.bg_gate.exclusive():
                yield

    # -- foreground

    def assign_replicas(self, v) -> list[int]:
        found = self.centroids.search_centroids(v, self.cfg.replica_count)
        if not found:
            return []
        bound = self.cfg.replica_distance_ratio ** 2 * found[0][1]
        return [found[0][0]] + [p for p, d in found[1:] if d <= bound]

    def insert(self, vid: int, v) -> None:
        v = as_vector(v, self.cfg.dim, self.cfg.element_type)
        vid = int(vid)
        with self.fg_gate.shared():
            self.versions.register(vid)
            self._bump("inserts")
            if not len(self.centroids) and self._bootstrap(vid, v):
                return
            self._place(vid, 0, v)

    def _bootstrap(self, vid, v) -> bool:
        with self._bootstrap_lock:
            if len(self.centroids):
                return False
            pid = self._new_posting_id()
            self._put(pid, make_entries(vid, 0, v, self.cfg.dim, self.cfg.element_type))
            self.centroids.add_centroid(pid, v)
            return True

    def _place(self, vid: int, version: int, v: np.ndarray) -> list[int]:
        """Append one version of a vector to each of its replica postings.

        A target that disappears under a concurrent split or merge is
        replaced by searching again.
        """
        entry = make_entries(vid, version, v, self.cfg.dim, self.cfg.element_type)
        done: list[int] = []
        for _ in range(MAX_PLACEMENT_RETRIES):
            targets = self.assign_replicas(v)
            if not targets:
                if self._bootstrap(vid, v):
                    return done
                continue
            missing = False
            for t in targets:
                if t in done:
                    continue
                with self._lock_for(t):
                    if t not in self.store:
                        missing = True
                        continue
                    n = self._append(t, entry)
                done.append(t)
                if n > self.cfg.split_limit and self.split_enabled:
                    self._enqueue(SplitJob(t))
            if not missing:
                return done
            self._bump("placement_retries")
        raise InvalidStateError(f"could not place vector {vid}")

    def delete(self, vid: int) -> None:
        with self.fg_gate.shared():
            self.versions.delete(int(vid))
            self._bump("deletes")
            self._thinned(int(vid))

    def search(self, q, k: int, nprobe: int | None = None) -> SearchResult:
        q = as_vector(q, self.cfg.dim, self.cfg.element_type)
        if k <= 0:
            raise InvalidArgumentError("k must be positive")
        probes = self.centroids.search_centroids(q, nprobe or self.cfg.nprobe)
        pids = [p for p, _ in probes]
        postings = self.store.parallel_get(pids, missing="skip")
        parts = []
        blocks = 0
        for pid, entries in zip(pids, postings):
            if entries is None:
                continue
            blocks += self.store.blocks_for(len(entries))
            live = self._live(entries)
            if self.merge_enabled and len(live) < self.cfg.merge_threshold:
                self._enqueue(MergeJob(pid))
            if len(live):
                parts.append(live)
        self._bump("searches")
        self._bump("postings_scanned", len(pids))
        if not parts:
            return SearchResult([], [], len(pids), blocks)
        cand = np.concatenate(parts)
        ids = cand["id"]
        dists = sq_distances(cand["vector"], q)
        out_ids, out_d, seen = [], [], set()
        for i in np.lexsort((ids, dists)):
            vid = int(ids[i])
            if vid in seen:
                continue
            seen.add(vid)
            out_ids.append(vid)
            out_d.append(float(dists[i]))
            if len(out_ids) == k:
                break
        return SearchResult(out_ids, out_d, len(pids), blocks)

    # -- background operators

    def split(self, pid: int) -> None:
        if not self.split_enabled:
            return
        cfg = self.cfg
        with self._lock_for(pid):
            if pid not in self.store or self.store.entry_count(pid) <= cfg.split_limit:
                self._bump("split_aborts")
                return
            live = self._live(self.store.get(pid))
            if len(live) <= cfg.split_limit:
                if len(live) == 0:
                    self._drop_posting(pid)
                else:
                    self._put(pid, live)
                self._bump("split_compactions")
                return
            res = balanced_split(live["id"], live["vector"])
            a, b = self._new_posting_id(), self._new_posting_id()
            first, second = live[res.members1], live[res.members2]
            self._put(a, first)
            self._put(b, second)
            old = self.centroids.centroid(pid)
            self.centroids.update(remove=[pid], add=[(a, res.centroid1), (b, res.centroid2)])
            self._delete_posting(pid)
            self._bump("splits")
        for new_pid, part in ((a, first), (b, second)):
            if len(part) > cfg.split_limit:
                self._enqueue(SplitJob(new_pid))
        if self.reassign_enabled:
            cands = self.collect_reassign_candidates(
                old, [res.centroid1, res.centroid2], [a, b], cfg.reassign_range,
                new_postings=[first, second])
            for c in cands:
                self._enqueue(ReassignJob(*c))

    def _drop_posting(self, pid: int) -> None:
        if pid in self.centroids:
            self.centroids.remove_centroid(pid)
        self._delete_posting(pid)
        self._bump("empty_postings_dropped")

    def collect_reassign_candidates(self, old_centroid, new_centroids, new_posting_ids, range_: int,
                                    new_postings=None) -> list[ReassignCandidate]:
        """Vectors whose nearest posting may have changed after a split.

        In the two new postings: vectors at least as close to the old
        centroid as to both new ones, plus vectors the balance constraint
        left in the farther of the two halves. In the ``range_`` postings
        nearest the old centroid: vectors at least as close to some new
        centroid as to the old one.
        """
        A_o = np.asarray(old_centroid, dtype=np.float64)
        A = [np.asarray(c, dtype=np.float64) for c in new_centroids]
        new_posting_ids = list(new_posting_ids)
        if new_postings is None:
            new_postings = self.store.parallel_get(new_posting_ids, missing="skip")
        best: dict[int, tuple] = {}

        def offer(entries, pid, centroid, mask):
            self.touched.update(entries["id"].tolist())
            if not mask.any():
                return
            sel = entries[mask]
            own = sq_distances(sel["vector"], centroid)
            for e, d in zip(sel, own):
                vid = int(e["id"])
                prev = best.get(vid)
                if prev is None or (d, pid) < (prev[0], prev[1]):
                    best[vid] = (d, pid, e)

        for pid, own_c, entries in zip(new_posting_ids, A, new_postings):
            if entries is None:
                continue
            live = self._live(entries)
            if not len(live):
                continue
            vec = live["vector"]
            d_o = sq_distances(vec, A_o)
            d_new = [sq_distances(vec, c) for c in A]
            d_own = sq_distances(vec, own_c)
            old_wins = np.logical_and.reduce([d_o <= d for d in d_new])
            misplaced = np.logical_or.reduce([d < d_own for d in d_new])
            offer(live, pid, own_c, old_wins | misplaced)

        if range_ > 0:
            near = self.centroids.search_centroids(A_o, range_, exclude=new_posting_ids)
            near_ids = [p for p, _ in near]
            for pid, entries in zip(near_ids, self.store.parallel_get(near_ids, missing="skip")):
                own_c = self.centroids.get(pid)  # a concurrent split or merge may have retired it
                if entries is None or own_c is None:
                    continue
                live = self._live(entries)
                if not len(live):
                    continue
                vec = live["vector"]
                d_o = sq_distances(vec, A_o)
                pulled = np.logical_or.reduce([sq_distances(vec, c) <= d_o for c in A])
                offer(live, pid, own_c, pulled)

        out = [ReassignCandidate(vid, e["vector"].copy(), int(e["version"]), pid)
               for vid, (_, pid, e) in sorted(best.items())]
        self._bump("reassign_candidates", len(out))
        return out

    def reassign(self, vid: int, v, observed_version: int, source: int | None = None) -> None:
        cur = self.versions.get(vid)
        if cur != observed_version:
            self._bump("reassign_aborts")
            return
        targets = self.assign_replicas(v)
        if not targets:
            self._bump("reassign_aborts")
            return
        if source is not None and targets[0] == source:
            self._bump("reassign_false_positives")
            return
        new_version = next_version(observed_version)
        if not self.versions.compare_and_swap(vid, observed_version, new_version):
            self._bump("cas_failures")
            self._bump("reassign_aborts")
            return
        if self.move_log is not None and source is not None:
            src, dst = self.centroids.get(source), self.centroids.get(targets[0])
            if src is not None and dst is not None:
                vf = np.asarray(v, dtype=np.float64)
                self.move_log.append((vid, float(sq_distances(src[None, :], vf)[0]),
                                      float(sq_distances(dst[None, :], vf)[0])))
        entry = make_entries(vid, new_version, v, self.cfg.dim, self.cfg.element_type)
        missing = False
        placed = []
        for t in targets:
            with self._lock_for(t):
                if t not in self.store:
                    missing = True
                    continue
                n = self._append(t, entry)
            placed.append(t)
            if n > self.cfg.split_limit:
                self._enqueue(SplitJob(t))
        self._bump("reassigns")
        self._thinned(vid, keep=placed)
        if missing:
            self._bump("reassign_retries")
            self._enqueue(ReassignJob(vid, v, new_version, None))

    def merge(self, pid: int) -> None:
        if not self.merge_enabled:
            return
        cfg = self.cfg
        if pid not in self.store or pid not in self.centroids:
            self._bump("merge_aborts")
            return
        live = self._live(self.store.get(pid))
        if len(live) >= cfg.merge_threshold:
            self._bump("merge_skips")
            return
        if len(live) == 0:
            with self._lock_for(pid):
                if pid in self.store and not len(self._live(self.store.get(pid))):
                    self._drop_posting(pid)
            return
        mine_c = self.centroids.get(pid)
        near = self.centroids.search_centroids(mine_c, 1, exclude=[pid]) if mine_c is not None else []
        if not near:
            self._bump("merge_aborts")
            return
        partner = near[0][0]
        with self._locked(pid, partner):
            if pid not in self.store or partner not in self.store or partner not in self.centroids:
                self._bump("merge_aborts")
                return
            mine = self._live(self.store.get(pid))
            theirs = self._live(self.store.get(partner))
            if len(mine) >= cfg.merge_threshold or len(mine) + len(theirs) > cfg.split_limit:
                self._bump("merge_aborts")
                return
            victim, survivor = (pid, partner) if len(mine) <= len(theirs) else (partner, pid)
            moved = mine if victim == pid else theirs
            kept = theirs if victim == pid else mine
            have = set(zip(kept["id"].tolist(), kept["version"].tolist()))
            fresh = np.array([(i, v) not in have for i, v in zip(moved["id"].tolist(), moved["version"].tolist())],
                             dtype=bool)
            self.centroids.remove_centroid(victim)
            n = self._append(survivor, moved[fresh])
            self._delete_posting(victim)
            self._bump("merges")
        if n > cfg.split_limit:
            self._enqueue(SplitJob(survivor))
        if self.reassign_enabled:
            for e in moved:
                self._enqueue(ReassignJob(int(e["id"]), e["vector"].copy(), int(e["version"]), survivor))

    # -- audits and introspection

    def posting_sizes(self) -> dict[int, tuple[int, int]]:
        """posting id -> (entries on disk, live entries) for every live posting."""
        pids = [p for p in self.store.posting_ids() if p in self.centroids]
        out = {}
        for pid, entries in zip(pids, self.store.parallel_get(pids, missing="skip")):
            if entries is not None:
                out[pid] = (len(entries), len(self._live(entries)))
        return out

    def live_vectors(self) -> dict[int, np.ndarray]:
        """Every live vector found on disk, keyed by id."""
        out = {}
        pids = self.store.posting_ids()
        for entries in self.store.parallel_get(pids, missing="skip"):
            if entries is None:
                continue
            for e in self._live(entries):
                out.setdefault(int(e["id"]), e["vector"].copy())
        return out

    def npa_report(self, ids=None) -> dict:
        """Audit nearest-posting assignment against brute force over centroids.

        A vector's primary posting is, among the postings holding its
        current version, the one with the nearest centroid. It violates the
        property when that centroid is strictly farther than the nearest
        live centroid overall.
        """
        cids, C = self.centroids.live_view()
        col = {int(p): j for j, p in enumerate(cids)}
        holders: dict[int, list[int]] = {}
        vecs: dict[int, np.ndarray] = {}
        pids = [p for p in self.store.posting_ids() if p in col]
        wanted = None if ids is None else set(ids)
        for pid, entries in zip(pids, self.store.parallel_get(pids, missing="skip")):
            if entries is None:
                continue
            for e in self._live(entries):
                vid = int(e["id"])
                if wanted is not None and vid not in wanted:
                    continue
                holders.setdefault(vid, []).append(col[pid])
                vecs.setdefault(vid, e["vector"])
        live = self.versions.live_ids() if wanted is None else [i for i in wanted if self.versions.is_live(i)]
        lost = [i for i in live if i not in holders]
        order = sorted(holders)
        violations = 0
        if order:
            V = np.stack([vecs[i] for i in order]).astype(np.float64)
            _, best = nearest_rows(V, C, 1)
            pair_row = np.repeat(np.arange(len(order)), [len(holders[i]) for i in order])
            pair_col = np.concatenate([holders[i] for i in order])
            d = V[pair_row] - C[pair_col]
            held = np.minimum.reduceat((d * d).sum(axis=1), np.searchsorted(pair_row, np.arange(len(order))))
            violations = int(np.count_nonzero(held > best[:, 0]))
        checked = len(order)
        return {
            "checked": checked,
            "violations": violations,
            "lost": len(lost),
            "fraction": violations / checked if checked else 0.0,
        }

    def npa_audit(self, ids=None) -> float:
        return self.npa_report(ids)["fraction"]


def _replica_placement(X: np.ndarray, C: np.ndarray, cfg: IndexConfig):
    """Flattened :meth:`LireEngine.assign_replicas` for every row of ``X``.

    Returns ``(row, column, rank)`` triples, rank 0 being the primary.
    """
    cols, d = nearest_rows(X, C, cfg.replica_count)
    ok = d <= cfg.replica_distance_ratio ** 2 * d[:, :1]
    ok[:, 0] = True
    rows, rank = np.nonzero(ok)
    return rows, cols[rows, rank], rank
