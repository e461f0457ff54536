"""Epoch-driven update simulation with recall and I/O metrics."""

from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass

import numpy as np

from ..core import IndexConfig, brute_force_knn_matrix, recall_at_k
from ..engine import LireEngine
from .workload import Workload, WorkloadSpec, generate_workload

K = 10

CSV_COLUMNS = [
    "epoch", "recall_at_10", "postings_scanned_p99", "block_reads", "block_writes", "splits",
    "merges", "reassigns", "reassign_aborts", "npa_violation_fraction", "live_vectors", "live_postings",
]


@dataclass
class EpochMetrics:
    epoch: int
    recall_at_10: float
    postings_scanned_p99: float  # p99 over queries of blocks read while scanning postings
    block_reads: int
    block_writes: int
    splits: int
    merges: int
    reassigns: int
    reassign_aborts: int
    npa_violation_fraction: float
    live_vectors: int
    live_postings: int
    max_posting_size: int = 0
    min_posting_size: int = 0
    max_live_posting_size: int = 0
    min_live_posting_size: int = 0
    mean_posting_size: float = 0.0
    cumulative_splits: int = 0
    jobs_drained: int = 0

    def row(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


class GroundTruth:
    """Live-set tracker answering exact top-k for the fixed query set."""

    def __init__(self, workload: Workload):
        self.vectors = workload.vectors
        self.live: set[int] = set(workload.base_ids.tolist())

    def apply(self, deletes, inserts):
        self.live.difference_update(deletes)
        self.live.update(inserts)

    def topk(self, queries, k=K) -> list[list[int]]:
        ids = np.array(sorted(self.live), dtype=np.uint64)
        matrix = np.stack([self.vectors[int(i)] for i in ids])
        return brute_force_knn_matrix(ids, matrix, queries, k)


def evaluate(engine: LireEngine, queries, truth: list[list[int]], nprobe: int | None = None):
    """Mean recall@10 and per-query block reads."""
    recalls, reads = [], []
    for q, gt in zip(queries, truth):
        res = engine.search(q, K, nprobe=nprobe)
        recalls.append(recall_at_k(res.ids, gt))
        reads.append(res.block_reads)
    return float(np.mean(recalls)), np.asarray(reads)


def _posting_stats(engine: LireEngine) -> dict:
    sizes = engine.posting_sizes()
    disk = [s[0] for s in sizes.values()] or [0]
    live = [s[1] for s in sizes.values()] or [0]
    return {
        "max_posting_size": int(max(disk)),
        "min_posting_size": int(min(disk)),
        "max_live_posting_size": int(max(live)),
        "min_live_posting_size": int(min(live)),
        "mean_posting_size": float(np.mean(disk)),
        "live_postings": len(sizes),
    }


def build_engine(workload: Workload, cfg: IndexConfig, mode: str = "lire", ids=None, **kwargs) -> LireEngine:
    ids = workload.base_ids if ids is None else np.asarray(sorted(ids), dtype=np.int64)
    return LireEngine.build(ids, np.stack([workload.vectors[int(i)] for i in ids]), cfg, mode=mode, **kwargs)


def run_simulation(spec: WorkloadSpec, cfg: IndexConfig, mode: str = "lire", workload: Workload | None = None,
                   engine_hook=None) -> list[EpochMetrics]:
    """Build on the base set, then per epoch: deletes, inserts, drain, evaluate.

    Row 0 describes the freshly built index. Counter columns are deltas over
    the epoch (updates, background work and the evaluation queries); recall
    and the NPA fraction are point-in-time. ``engine_hook(epoch, engine)`` is
    called after each evaluation.
    """
    wl = workload or generate_workload(spec)
    engine = build_engine(wl, cfg, mode)
    truth = GroundTruth(wl)
    rows = []
    prev = engine.counters()
    try:
        for e in range(len(wl.epochs) + 1):
            drained = 0
            if e:
                ep = wl.epochs[e - 1]
                for vid in ep.deletes:
                    engine.delete(vid)
                for vid in ep.inserts:
                    engine.insert(vid, wl.vectors[vid])
                drained = engine.drain_background()
                truth.apply(ep.deletes, ep.inserts)
            recall, reads = evaluate(engine, wl.queries, truth.topk(wl.queries))
            # merges queued by the evaluation queries run before the epoch is closed
            drained += engine.drain_background()
            cur = engine.counters()
            delta = {k: cur.get(k, 0) - prev.get(k, 0) for k in set(cur) | set(prev)}
            stats = _posting_stats(engine)
            rows.append(EpochMetrics(
                epoch=e,
                recall_at_10=round(recall, 6),
                postings_scanned_p99=float(np.percentile(reads, 99)),
                block_reads=delta.get("block_reads", 0),
                block_writes=delta.get("block_writes", 0),
                splits=delta.get("splits", 0),
                merges=delta.get("merges", 0),
                reassigns=delta.get("reassigns", 0),
                reassign_aborts=delta.get("reassign_aborts", 0),
                npa_violation_fraction=round(engine.npa_audit(), 6),
                live_vectors=len(truth.live),
                cumulative_splits=cur.get("splits", 0),
                jobs_drained=drained,
                **stats,
            ))
            prev = cur
            if engine_hook is not None:
                engine_hook(e, engine)
    finally:
        engine.close()
    return rows


def static_recall(spec: WorkloadSpec, cfg: IndexConfig, workload: Workload | None = None) -> tuple[float, np.ndarray]:
    """Recall of an index built from scratch on the final live set."""
    wl = workload or generate_workload(spec)
    live = wl.live_after()
    engine = build_engine(wl, cfg, "lire", ids=live)
    truth = GroundTruth(wl)
    truth.live = set(live)
    try:
        return evaluate(engine, wl.queries, truth.topk(wl.queries))
    finally:
        engine.close()


def metrics_csv(rows: list[EpochMetrics], extra: dict | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    head = list(extra) if extra else []
    writer.writerow(head + CSV_COLUMNS)
    for r in rows:
        writer.writerow([extra[h] for h in head] + r.row())
    return buf.getvalue()


def parameter_sweep(spec: WorkloadSpec, cfg: IndexConfig, param: str, values, mode: str = "lire"):
    """One simulation per parameter value on a shared workload.

    Returns ``(csv_text, {value: rows})``.
    """
    if not values:
        raise ValueError("values must be non-empty")
    if param not in ("reassign_range", "nprobe"):
        raise ValueError("param must be reassign_range or nprobe")
    wl = generate_workload(spec)
    results = {}
    parts = []
    for i, v in enumerate(values):
        c = dataclasses.replace(cfg, **{param: int(v)})
        rows = run_simulation(spec, c, mode, workload=wl)
        results[v] = rows
        text = metrics_csv(rows, {param: v})
        parts.append(text if i == 0 else text.split("\n", 1)[1])
    return "".join(parts), results
