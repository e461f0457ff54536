"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line and the session summary repeats them.
The heavy 20k-vector stream is shared by criteria 1, 2 and 5.
"""

import itertools
import threading
import time

import numpy as np
import pytest

from conftest import blobs, report_criterion
from freshivf.bench.crash import CRASH_KINDS, crash_test, default_crash_points
from freshivf.bench.simulate import parameter_sweep, run_simulation, static_recall
from freshivf.bench.workload import WorkloadSpec, generate_workload
from freshivf.core import IndexConfig, brute_force_knn_matrix, sq_distances
from freshivf.engine import LireEngine, ReassignJob
from freshivf.storage import BlockDevice

pytestmark = pytest.mark.acceptance

SHIFT_20K = WorkloadSpec(base_size=20_000, epochs=20, update_rate=1 / 60, distribution="clustered_shift", seed=1)


@pytest.fixture(scope="module")
def shift_runs():
    wl = generate_workload(SHIFT_20K)
    cfg = IndexConfig()
    t0 = time.perf_counter()
    lire = run_simulation(SHIFT_20K, cfg, "lire", workload=wl)
    static, _ = static_recall(SHIFT_20K, cfg, wl)
    elapsed = time.perf_counter() - t0
    append = run_simulation(SHIFT_20K, cfg, "append_only", workload=wl)
    return {"lire": lire, "append": append, "static": static, "seconds": elapsed}


def test_criterion_1_static_vs_updated_recall(shift_runs):
    lire = shift_runs["lire"][-1].recall_at_10
    static = shift_runs["static"]
    gap = abs(lire - static)
    ok = gap <= 0.02 and shift_runs["seconds"] < 300
    report_criterion(1, ok, f"updated recall {lire:.4f}, static {static:.4f}, gap {gap:.4f} (<= 0.02), "
                            f"runtime {shift_runs['seconds']:.0f}s (< 300s)")
    assert ok


def test_criterion_2_append_only_degrades(shift_runs):
    lire, app = shift_runs["lire"][-1], shift_runs["append"][-1]
    drop = lire.recall_at_10 - app.recall_at_10
    ratio = app.postings_scanned_p99 / lire.postings_scanned_p99
    ok = drop >= 0.01 and ratio >= 2.0
    report_criterion(2, ok, f"append-only recall {app.recall_at_10:.4f} vs {lire.recall_at_10:.4f} "
                            f"(drop {drop:.4f} >= 0.01); p99 block reads {app.postings_scanned_p99:g} vs "
                            f"{lire.postings_scanned_p99:g} ({ratio:.2f}x >= 2x)")
    assert ok


def test_criterion_3_npa_repair():
    spec = WorkloadSpec(base_size=3000, epochs=6, update_rate=0.05, distribution="clustered_shift", seed=4)
    wl = generate_workload(spec)
    results = {}
    for rng_ in (100_000, 0):
        audits = []

        def hook(epoch, engine):
            touched = [i for i in engine.touched if engine.versions.is_live(i)]
            rep = engine.npa_report(touched)
            audits.append((rep["violations"], rep["checked"], rep["lost"], len(engine.centroids)))

        run_simulation(spec, IndexConfig(reassign_range=rng_), "lire", workload=wl, engine_hook=hook)
        results[rng_] = audits
    full = results[100_000]
    none = results[0]
    ok_full = all(v == 0 and lost == 0 for v, _, lost, _ in full) and full[-1][1] > 0
    ok_none = none[-1][0] > 0
    report_criterion(3, ok_full and ok_none,
                     f"range >= postings: violations per epoch {[a[0] for a in full]} over "
                     f"{full[-1][1]} touched vectors; range 0: {none[-1][0]} violations at the end (> 0)")
    assert ok_full and ok_none


def test_criterion_4_convergence_bound():
    lines, ok = [], True
    for seed in range(10):
        dist = "clustered_shift" if seed % 2 == 0 else "uniform"
        limit = 8 if seed < 5 else 32
        cfg = IndexConfig(split_limit=limit, merge_threshold=2)
        spec = WorkloadSpec(base_size=1500, epochs=5, update_rate=0.06, distribution=dist, seed=seed)
        wl = generate_workload(spec)
        eng = LireEngine.build(wl.base_ids, wl.base_matrix(), cfg)
        live = len(wl.base_ids)
        high = live
        bound = 200 * (live + len(wl.ops()))
        for ep in wl.epochs:
            for vid in ep.deletes:
                eng.delete(vid)
            for vid in ep.inserts:
                eng.insert(vid, wl.vectors[vid])
            live += len(ep.inserts) - len(ep.deletes)
            high = max(high, live)  # deletes come first in each epoch, so the peak follows the inserts
            eng.drain_background(max_jobs=bound)  # raises if a cascade does not settle
        splits = eng.counters().get("splits", 0)
        ok &= splits <= high
        lines.append(f"{seed}:{splits}<={high}")
        eng.close()
    report_criterion(4, ok, "splits <= live high-water mark, all drains settled; " + " ".join(lines))
    assert ok


def test_criterion_5_posting_size_invariant(shift_runs):
    rows = shift_runs["lire"]
    big = max(r.max_live_posting_size for r in rows)
    small = min(r.min_live_posting_size for r in rows)
    ok = big <= 32 and small >= 1
    report_criterion(5, ok, f"over {len(rows)} epoch checkpoints live posting sizes stay within [{small}, {big}] "
                            f"(limit 32)")
    assert ok


def test_criterion_6_tombstone_soundness():
    rng = np.random.default_rng(6)
    X = blobs(rng, 5000)
    cfg = IndexConfig(deterministic=False, background_workers=2)
    eng = LireEngine.build(np.arange(len(X)), X, cfg)
    clock = itertools.count()
    deleted_at: dict[int, int] = {}
    violations = []
    counts = {"search": 0, "insert": 0, "delete": 0}
    stop = time.monotonic() + 60.0
    lock = threading.Lock()
    crashed = []

    def foreground(t):
        try:
            work(t)
        except Exception as exc:  # surfaced below; a dead thread must not pass silently
            crashed.append(repr(exc))

    def work(t):
        r = np.random.default_rng(100 + t)
        mine = list(range(t, len(X), 4))
        nxt = 1_000_000 * (t + 1)
        recent = []
        vecs = {}
        n = {"search": 0, "insert": 0, "delete": 0}
        while time.monotonic() < stop:
            u = r.random()
            if u < 0.3 and mine:
                vid = mine.pop(int(r.integers(len(mine))))
                eng.delete(vid)
                deleted_at[vid] = next(clock)
                recent.append(vid)
                n["delete"] += 1
            elif u < 0.6:
                v = X[r.integers(len(X))] + r.normal(scale=0.3, size=16) + (t + 1)
                eng.insert(nxt, v)
                vecs[nxt] = v
                mine.append(nxt)
                nxt += 1
                n["insert"] += 1
            else:
                if recent and r.random() < 0.7:
                    gone = recent[-1]
                    q = vecs[gone] if gone in vecs else X[gone]
                else:
                    q = r.normal(scale=6, size=16)
                started = next(clock)
                res = eng.search(q, 10)
                for vid in res.ids:
                    d = deleted_at.get(vid)
                    if d is not None and d < started:
                        violations.append(vid)
                n["search"] += 1
        with lock:
            for k in counts:
                counts[k] += n[k]

    ts = [threading.Thread(target=foreground, args=(t,)) for t in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    eng.drain_background()
    every = len(eng.centroids)
    leftover = set()
    for q in rng.normal(scale=6, size=(50, 16)):
        leftover |= set(eng.search(q, 50, nprobe=every).ids) & set(deleted_at)
    errors = eng.counters().get("job_errors", 0)
    eng.close()
    ok = not violations and not leftover and errors == 0 and not crashed and min(counts.values()) > 0
    report_criterion(6, ok, f"{len(crashed)} thread failures, 60s, 4 foreground + 2 background threads, {counts['search']} searches, "
                            f"{counts['insert']} inserts, {counts['delete']} deletes: "
                            f"{len(violations) + len(leftover)} deleted ids returned")
    assert ok


def test_criterion_7_duplicate_reassign():
    rng = np.random.default_rng(7)
    X = blobs(rng, 3000)
    cfg = IndexConfig(deterministic=False, background_workers=2)
    eng = LireEngine.build(np.arange(len(X)), X, cfg)
    targets = rng.choice(len(X), size=600, replace=False)
    barrier = threading.Barrier(5)

    def duplicate_jobs(t):
        barrier.wait()
        for vid in targets:
            ver = eng.versions.get(int(vid))
            v = X[vid]
            if t % 2:
                eng._enqueue(ReassignJob(int(vid), v, ver, None))
            else:
                eng.reassign(int(vid), v, ver)

    def churn():
        barrier.wait()
        for i in range(1500):
            eng.insert(10_000 + i, X[i % len(X)] + 2.5)

    ts = [threading.Thread(target=duplicate_jobs, args=(t,)) for t in range(4)]
    ts.append(threading.Thread(target=churn))
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    eng.drain_background()
    eng.close()

    expected = set(range(len(X))) | set(range(10_000, 11_500))
    copies: dict[int, list[int]] = {}
    for pid in eng.store.posting_ids():
        e = eng.store.get(pid)
        cur = e[eng.versions.live_mask(e["id"], e["version"])]
        for vid in cur["id"].tolist():
            copies.setdefault(vid, []).append(pid)
    per_posting_unique = all(len(p) == len(set(p)) for p in copies.values())
    within_replicas = all(1 <= len(set(p)) <= cfg.replica_count for p in copies.values())
    c = eng.counters()
    lost = expected - set(copies)
    ok = (set(eng.versions.live_ids()) == expected and not lost and per_posting_unique and within_replicas
          and c.get("reassign_aborts", 0) > 0 and c.get("job_errors", 0) == 0)
    report_criterion(7, ok, f"{c.get('reassigns', 0)} reassigns won, {c.get('reassign_aborts', 0)} aborted, "
                            f"{c.get('cas_failures', 0)} CAS failures; {len(lost)} lost; one current version per id "
                            f"in 1..{cfg.replica_count} postings: {per_posting_unique and within_replicas}")
    assert ok


def test_criterion_8_append_locality():
    spec = WorkloadSpec(base_size=2000, epochs=4, update_rate=0.05, distribution="clustered_shift", seed=8)
    wl = generate_workload(spec)
    cfg = IndexConfig()
    eng = LireEngine.build(wl.base_ids, wl.base_matrix(), cfg, device=BlockDevice(cfg.block_size, cfg.block_count,
                                                                                    trace=True))
    store = eng.store
    original = store.append
    stats = {"appends": 0, "max_reads": 0, "in_place": 0}

    def mapped():
        return {o for p in store.posting_ids() for o in store.entry(p).block_offsets} | set(store.pool.pre_release)

    def traced_append(pid, entries):
        before = mapped()
        store.device.trace.clear()
        n = original(pid, entries)
        reads = [o for op, o in store.device.trace if op == "r"]
        writes = [o for op, o in store.device.trace if op == "w"]
        if len(entries):
            stats["appends"] += 1
            stats["max_reads"] = max(stats["max_reads"], len(reads))
            stats["in_place"] += sum(o in before for o in writes)
        return n

    store.append = traced_append
    for ep in wl.epochs:
        for vid in ep.deletes:
            eng.delete(vid)
        for vid in ep.inserts:
            eng.insert(vid, wl.vectors[vid])
        eng.drain_background()
    eng.close()
    ok = stats["appends"] > 0 and stats["max_reads"] <= 1 and stats["in_place"] == 0
    report_criterion(8, ok, f"{stats['appends']} appends: at most {stats['max_reads']} block read each, "
                            f"{stats['in_place']} in-place rewrites")
    assert ok


def test_criterion_9_crash_recovery(tmp_path):
    spec = WorkloadSpec(base_size=2000, epochs=5, update_rate=0.05, distribution="clustered_shift", seed=9)
    cfg = IndexConfig(block_count=8192)
    n_ops = len(generate_workload(spec).ops())
    points = default_crash_points(n_ops, 200)
    report = crash_test(spec, cfg, points, snapshot_every=200, workdir=tmp_path)
    for line in report.lines():
        print(line)
    stages = {p.kind for p in points if p.kind.startswith("snapshot:")}
    passed = sum(r.passed for r in report.results)
    ok = len(points) >= 20 and report.passed and stages == {k for k in CRASH_KINDS if k.startswith("snapshot:")}
    report_criterion(9, ok, f"{passed}/{len(points)} crash points passed, covering {len(stages)} snapshot stages")
    assert ok


def test_criterion_10_oracle_equivalence():
    rng = np.random.default_rng(10)
    X = blobs(rng, 5500)
    eng = LireEngine.build(np.arange(5000), X[:5000], IndexConfig())
    for i in range(500):  # some churn so the index is not just a fresh build
        eng.delete(i * 10)
        eng.insert(5000 + i, X[5000 + i])
    eng.drain_background()
    live = np.array(sorted(eng.versions.live_ids()), dtype=np.uint64)
    M = X[live.astype(np.int64)]
    Q = rng.normal(scale=6, size=(1000, 16)).astype(np.float32)
    truth = brute_force_knn_matrix(live, M, Q, 10)
    every = len(eng.centroids)
    mismatched = 0
    for q, t in zip(Q, truth):
        res = eng.search(q, 10, nprobe=every)
        exact = sq_distances(X[np.array(t)], q).tolist()
        if res.ids != t or not np.allclose(res.distances, exact, rtol=1e-6, atol=1e-6):
            mismatched += 1
    eng.close()
    ok = len(live) == 5000 and mismatched == 0
    report_criterion(10, ok, f"{1000 - mismatched}/1000 queries identical to brute force over {len(live)} vectors "
                             f"with nprobe={every}")
    assert ok


def test_criterion_11_reassign_range_shape():
    spec = WorkloadSpec(base_size=10_000, epochs=20, update_rate=1 / 60, distribution="clustered_shift", seed=1)
    values = [0, 2, 4, 8, 16]
    _, res = parameter_sweep(spec, IndexConfig(), "reassign_range", values)
    rec = [res[v][-1].recall_at_10 for v in values]
    npa = [res[v][-1].npa_violation_fraction for v in values]
    monotone = all(b >= a - 0.005 for a, b in zip(rec, rec[1:]))
    diminishing = (rec[4] - rec[3]) <= (rec[3] - rec[2]) + 0.005
    ok = monotone and diminishing
    report_criterion(11, ok, "recall by range " + ", ".join(f"{v}:{r:.4f}" for v, r in zip(values, rec))
                     + f"; npa {', '.join(f'{x:.4f}' for x in npa)}")
    assert ok
