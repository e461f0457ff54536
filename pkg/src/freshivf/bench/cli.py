"""``bench`` command line: build, simulate, sweep, crash-test, snapshot."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..core import FreshIVFError, IndexConfig, read_vectors
from ..recovery import DurableIndex
from .crash import CrashPoint, crash_test
from .simulate import metrics_csv, parameter_sweep, run_simulation
from .workload import WorkloadSpec


def _config(args) -> IndexConfig:
    cfg = IndexConfig.from_file(args.config) if getattr(args, "config", None) else IndexConfig()
    if args.deterministic is not None:
        cfg = cfg.replace(deterministic=args.deterministic)
    return cfg


def _spec(args) -> WorkloadSpec:
    spec = WorkloadSpec.from_file(args.spec) if getattr(args, "spec", None) else WorkloadSpec()
    if args.seed is not None:
        spec = spec.replace(seed=args.seed)
    return spec


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_build(args) -> int:
    cfg = _config(args)
    X = read_vectors(args.input, cfg.element_type)
    if X.shape[1] != cfg.dim:
        raise SystemExit(f"input vectors have dimension {X.shape[1]}, config says {cfg.dim}")
    idx = DurableIndex.build(args.out, np.arange(len(X)), X, cfg)
    try:
        print(f"built {len(X)} vectors into {len(idx.engine.centroids)} postings at {args.out}")
    finally:
        idx.close()
    return 0


def cmd_simulate(args) -> int:
    rows = run_simulation(_spec(args), _config(args), args.mode)
    _emit(metrics_csv(rows), args.out)
    return 0


def cmd_sweep(args) -> int:
    values = [int(v) for v in args.values.split(",") if v.strip()]
    text, _ = parameter_sweep(_spec(args), _config(args), args.param, values, args.mode)
    _emit(text, args.out)
    return 0


def cmd_crash_test(args) -> int:
    points = [CrashPoint.parse(p) for p in args.points.split(",") if p.strip()] if args.points else None
    report = crash_test(_spec(args), _config(args), points, snapshot_every=args.snapshot_every)
    for line in report.lines():
        print(line)
    print(f"{sum(r.passed for r in report.results)}/{len(report.results)} crash points passed")
    return 0 if report.passed else 1


def cmd_snapshot(args) -> int:
    idx = DurableIndex(args.index)
    try:
        m = idx.snapshot()
        print(f"snapshot {m.snapshot_id} written, log starts at sequence {m.wal_low_watermark}")
    finally:
        idx.close()
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="Desk-scale harness for the updatable cluster index.")
    p.add_argument("--seed", type=int, default=None, help="override the workload seed")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="run background jobs inline (default: as configured)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="statically build a durable index from an fvecs/bvecs file")
    b.add_argument("--input", required=True)
    b.add_argument("--config")
    b.add_argument("--out", default="index")
    b.set_defaults(func=cmd_build)

    s = sub.add_parser("simulate", help="run the epoch simulation and write metrics CSV")
    s.add_argument("--mode", choices=("lire", "append_only", "split_only"), default="lire")
    s.add_argument("--spec")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="one simulation per parameter value")
    w.add_argument("--param", choices=("reassign_range", "nprobe"), default="reassign_range")
    w.add_argument("--values", default="0,2,4,8,16")
    w.add_argument("--mode", choices=("lire", "append_only", "split_only"), default="lire")
    w.add_argument("--spec")
    w.add_argument("--config")
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep)

    c = sub.add_parser("crash-test", help="crash, recover and verify at each point")
    c.add_argument("--points", help="comma list of N or N@kind, e.g. 0,50,120@logged,300@snapshot:manifest")
    c.add_argument("--spec")
    c.add_argument("--config")
    c.add_argument("--snapshot-every", type=int, default=200)
    c.set_defaults(func=cmd_crash_test)

    n = sub.add_parser("snapshot", help="take a snapshot of a durable index directory now")
    n.add_argument("--index", required=True)
    n.set_defaults(func=cmd_snapshot)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (FreshIVFError, OSError) as exc:
        print(f"bench: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
