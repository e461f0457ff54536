"""Crash-point harness: run a durable index to a point, kill it, recover, compare."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import IndexConfig, InvalidArgumentError, brute_force_knn_matrix
from ..engine import LireEngine
from ..recovery import SNAPSHOT_STAGES, WAL_FILE, DurableIndex, WalRecord
from .workload import WorkloadSpec, generate_workload

# "ack": the first n operations were acknowledged, nothing else happened.
# "logged": operation n+1 reached the log but was never applied.
# "torn": half of operation n+1's log record hit the disk.
# "snapshot:<stage>": a snapshot started after n operations and died at <stage>.
CRASH_KINDS = ("ack", "logged", "torn") + tuple(f"snapshot:{s}" for s in SNAPSHOT_STAGES)


class SimulatedCrash(Exception):
    pass


@dataclass(frozen=True)
class CrashPoint:
    ops: int
    kind: str = "ack"

    def __post_init__(self):
        if self.ops < 0:
            raise InvalidArgumentError("crash point must be non-negative")
        if self.kind not in CRASH_KINDS:
            raise InvalidArgumentError(f"unknown crash kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "CrashPoint":
        """``"120"`` or ``"120@snapshot:manifest_partial"``."""
        n, _, kind = text.strip().partition("@")
        return cls(int(n), kind or "ack")

    def __str__(self):
        return f"{self.ops}@{self.kind}"


@dataclass
class PointResult:
    point: CrashPoint
    live_ok: bool
    golden_ok: bool
    exact_ok: bool
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.live_ok and self.golden_ok and self.exact_ok


@dataclass
class CrashReport:
    results: list[PointResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            out.append(f"{status} {r.point} live={r.live_ok} golden={r.golden_ok} exact={r.exact_ok} {r.detail}".rstrip())
        return out


def default_crash_points(n_ops: int, snapshot_every: int) -> list[CrashPoint]:
    """A spread of acknowledged, logged and torn points plus one per snapshot stage."""
    pts = [CrashPoint(0)]
    for frac in (0.1, 0.25, 0.4, 0.55, 0.7, 0.85, 1.0):
        pts.append(CrashPoint(int(frac * n_ops)))
    for frac in (0.15, 0.6):
        n = min(int(frac * n_ops), max(n_ops - 1, 0))
        pts.append(CrashPoint(n, "logged"))
        pts.append(CrashPoint(n, "torn"))
    # right after an automatic snapshot, so the log is empty
    pts.append(CrashPoint(min(snapshot_every, n_ops)))
    for i, stage in enumerate(SNAPSHOT_STAGES):
        pts.append(CrashPoint(int((0.2 + 0.07 * i) * n_ops), f"snapshot:{stage}"))
    return sorted(set(pts), key=lambda p: (p.ops, p.kind))


def _reference(wl, cfg: IndexConfig, ops) -> LireEngine:
    """Never-crashed engine that processed ``ops`` with the durable index's drain schedule."""
    eng = LireEngine.build(wl.base_ids, wl.base_matrix(), cfg)
    for op, vid in ops:
        if op == "insert":
            eng.insert(vid, wl.vectors[vid])
        else:
            eng.delete(vid)
        eng.drain_background()
    return eng


def run_crash_point(wl, cfg: IndexConfig, point: CrashPoint, directory, snapshot_every: int,
                    golden: np.ndarray, k: int = 10) -> PointResult:
    ops = wl.ops()
    if point.ops > len(ops) or (point.kind in ("logged", "torn") and point.ops >= len(ops)):
        raise InvalidArgumentError(f"crash point {point} is beyond the {len(ops)}-operation stream")
    armed = {"stage": None}

    def fault(stage):
        if stage == armed["stage"]:
            raise SimulatedCrash(stage)

    idx = DurableIndex.build(directory, wl.base_ids, wl.base_matrix(), cfg,
                             snapshot_every=snapshot_every, sync=False, fault=fault)

    def apply(op, vid):
        if op == "insert":
            idx.insert(vid, wl.vectors[vid])
        else:
            idx.delete(vid)

    applied = point.ops
    try:
        for op, vid in ops[:point.ops]:
            apply(op, vid)
        if point.kind == "logged":
            armed["stage"] = "logged"
            applied += 1
            apply(*ops[point.ops])
        elif point.kind == "torn":
            op, vid = ops[point.ops]
            seq = idx.wal.last_sequence + 1
            rec = WalRecord.insert(seq, vid, wl.vectors[vid]) if op == "insert" else WalRecord.delete(seq, vid)
            data = rec.encode()
            with open(Path(directory) / WAL_FILE, "ab") as fh:
                fh.write(data[: len(data) // 2])
        elif point.kind.startswith("snapshot:"):
            armed["stage"] = point.kind.split(":", 1)[1]
            idx.snapshot()
    except SimulatedCrash:
        pass
    idx.abandon()

    expected_ops = ops[:applied]
    live = {int(i) for i in wl.base_ids}
    for op, vid in expected_ops:
        (live.add if op == "insert" else live.discard)(vid)

    rec = DurableIndex(directory, sync=False)
    ref = _reference(wl, cfg, expected_ops)
    try:
        got_live = rec.live_ids()
        live_ok = got_live == live
        ids = np.array(sorted(live), dtype=np.uint64)
        truth = brute_force_knn_matrix(ids, np.stack([wl.vectors[int(i)] for i in ids]), golden, k)
        everything = max(len(rec.engine.centroids), 1)
        golden_ok = all(rec.search(q, k, nprobe=everything).ids == t for q, t in zip(golden, truth))
        # default probing must match the never-crashed engine exactly
        exact_ok = all(rec.search(q, k).ids == ref.search(q, k).ids for q in golden)
        detail = "" if live_ok else f"live {len(got_live)} vs expected {len(live)}"
        return PointResult(point, live_ok, golden_ok, exact_ok, detail)
    finally:
        rec.abandon()
        ref.close()


def crash_test(spec: WorkloadSpec, cfg: IndexConfig, crash_points=None, snapshot_every: int = 200,
               n_golden: int = 100, workdir=None) -> CrashReport:
    """Run every crash point on a fresh directory and report pass/fail per point.

    Each point: build the base index durably, apply the operation stream up
    to the point with the chosen failure, drop the process state, recover
    from disk and check the live set and golden-query results (exhaustive
    probing against brute force, default probing against a never-crashed
    engine fed the same operations).
    """
    wl = generate_workload(spec)
    n_ops = len(wl.ops())
    points = [CrashPoint.parse(p) if isinstance(p, str) else p for p in
              (crash_points if crash_points is not None else default_crash_points(n_ops, snapshot_every))]
    rng = np.random.default_rng(spec.seed + 1)
    base = wl.base_matrix().astype(np.float64)
    golden = base[rng.choice(len(base), size=min(n_golden, len(base)), replace=False)]
    golden = (golden + rng.normal(scale=0.1, size=golden.shape)).astype(cfg.dtype) if cfg.element_type == "float32" \
        else golden.astype(cfg.dtype)
    report = CrashReport()
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        for i, p in enumerate(points):
            d = os.path.join(tmp, f"point-{i}")
            try:
                report.results.append(run_crash_point(wl, cfg, p, d, snapshot_every, golden))
            except InvalidArgumentError:
                raise
            except Exception as exc:  # a failed recovery is a report entry, not a crash of the harness
                report.results.append(PointResult(p, False, False, False, f"{type(exc).__name__}: {exc}"))
    return report
