"""Synthetic update workloads: a base set, an insert pool and per-epoch streams."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import InvalidArgumentError, parse_key_values

DISTRIBUTIONS = ("uniform", "clustered_shift")


@dataclass
class WorkloadSpec:
    base_size: int = 10_000
    pool_size: int = 0  # 0 means exactly what the epochs consume
    epochs: int = 10
    update_rate: float = 0.01
    distribution: str = "uniform"
    seed: int = 0
    dim: int = 16
    element_type: str = "float32"
    query_fraction: float = 0.01
    shifted_query_share: float = 0.5
    n_blobs: int = 64
    blob_std: float = 1.0
    center_spread: float = 4.0
    drifting_blobs: float = 0.35
    drift_distance: float = 20.0

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise InvalidArgumentError(f"distribution must be one of {DISTRIBUTIONS}")
        if self.epochs < 0 or self.base_size <= 0:
            raise InvalidArgumentError("base_size must be positive and epochs non-negative")
        if self.epochs and self.per_epoch < 1:
            raise InvalidArgumentError("update_rate * base_size must be at least 1")

    @property
    def per_epoch(self) -> int:
        return int(round(self.update_rate * self.base_size))

    def replace(self, **changes) -> "WorkloadSpec":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_text(cls, text: str) -> "WorkloadSpec":
        return cls(**parse_key_values(text, cls))

    @classmethod
    def from_file(cls, path) -> "WorkloadSpec":
        return cls.from_text(Path(path).read_text())


@dataclass
class Epoch:
    deletes: list[int]
    inserts: list[int]


@dataclass
class Workload:
    spec: WorkloadSpec
    base_ids: np.ndarray
    vectors: dict[int, np.ndarray]
    pool_ids: np.ndarray
    queries: np.ndarray
    epochs: list[Epoch] = field(default_factory=list)

    def base_matrix(self) -> np.ndarray:
        return np.stack([self.vectors[int(i)] for i in self.base_ids])

    def ops(self) -> list[tuple[str, int]]:
        """The flattened operation stream, deletes before inserts per epoch."""
        out = []
        for ep in self.epochs:
            out += [("delete", i) for i in ep.deletes]
            out += [("insert", i) for i in ep.inserts]
        return out

    def live_after(self, n_ops: int | None = None) -> set[int]:
        live = set(self.base_ids.tolist())
        for op, vid in self.ops()[:n_ops]:
            if op == "delete":
                live.discard(vid)
            else:
                live.add(vid)
        return live


def _to_element_type(x: np.ndarray, element_type: str) -> np.ndarray:
    if element_type == "uint8":
        return np.clip(np.rint(128 + 12 * x), 0, 255).astype(np.uint8)
    return x.astype(np.float32)


def generate_workload(spec: WorkloadSpec) -> Workload:
    """Deterministic base set, query set, insert pool and per-epoch streams.

    ``uniform`` draws every vector i.i.d. from one fixed Gaussian mixture and
    deletes uniformly at random from the live set.

    ``clustered_shift`` moves a subset of the mixture's blobs a little
    further every epoch: each epoch deletes vectors of the moving blobs from
    their original location and inserts replacements drawn around the
    blobs' current, displaced centres. New vectors therefore pile up in
    regions the initial partitioning did not anticipate. Once the original
    copies run out, deletes fall back to uniform over the live set.

    Queries are held out and never inserted. They follow the final live
    distribution: a share from the stationary blobs and, for
    ``clustered_shift``, ``shifted_query_share`` from the moved blobs at
    their final position.
    """
    rng = np.random.default_rng(spec.seed)
    per_epoch = spec.per_epoch
    need = per_epoch * spec.epochs
    pool_size = spec.pool_size or need
    if pool_size < need:
        raise InvalidArgumentError(f"pool of {pool_size} cannot feed {spec.epochs} epochs of {per_epoch} inserts")

    centers = rng.normal(scale=spec.center_spread, size=(spec.n_blobs, spec.dim))
    shifted = spec.distribution == "clustered_shift"
    moving = np.zeros(spec.n_blobs, dtype=bool)
    if shifted:
        k = max(1, int(round(spec.drifting_blobs * spec.n_blobs)))
        moving[rng.choice(spec.n_blobs, size=k, replace=False)] = True
    dirs = rng.normal(size=(spec.n_blobs, spec.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    def centres_at(e):
        frac = (e + 1) / max(spec.epochs, 1)
        return centers + (moving * frac * spec.drift_distance)[:, None] * dirs

    def sample(n, centres, blobs):
        which = blobs[rng.integers(len(blobs), size=n)]
        return centres[which] + rng.normal(scale=spec.blob_std, size=(n, spec.dim)), which

    n_queries = max(1, int(round(spec.query_fraction * spec.base_size)))
    n_shift_q = int(round(n_queries * spec.shifted_query_share)) if shifted and spec.epochs else 0
    still = np.flatnonzero(~moving) if shifted else np.arange(spec.n_blobs)
    if len(still) == 0:
        still = np.arange(spec.n_blobs)
        n_shift_q = 0

    base, base_blob = sample(spec.base_size, centers, np.arange(spec.n_blobs))
    queries = [sample(n_queries - n_shift_q, centers, still)[0]]
    pool = np.empty((0, spec.dim))
    if shifted:
        parts = [sample(per_epoch, centres_at(e), np.flatnonzero(moving))[0] for e in range(spec.epochs)]
        if pool_size > need:
            parts.append(sample(pool_size - need, centres_at(spec.epochs - 1), np.flatnonzero(moving))[0])
        if parts:
            pool = np.concatenate(parts)
        if n_shift_q:
            queries.append(sample(n_shift_q, centres_at(spec.epochs - 1), np.flatnonzero(moving))[0])
    else:
        pool = sample(pool_size, centers, np.arange(spec.n_blobs))[0]
    queries = np.concatenate(queries)

    base = _to_element_type(base, spec.element_type)
    pool = _to_element_type(pool, spec.element_type)
    queries = _to_element_type(queries, spec.element_type)

    base_ids = np.arange(len(base), dtype=np.int64)
    pool_ids = np.arange(spec.base_size, spec.base_size + len(pool), dtype=np.int64)
    vectors = {int(i): v for i, v in zip(base_ids, base)}
    vectors.update({int(i): v for i, v in zip(pool_ids, pool)})

    wl = Workload(spec, base_ids, vectors, pool_ids, queries)
    live = list(base_ids.tolist())
    # original copies of moving blobs, deleted first under clustered_shift
    movers = [i for i in base_ids.tolist() if moving[base_blob[i]]]
    rng.shuffle(movers)
    for e in range(spec.epochs):
        n_del = min(per_epoch, len(live))
        dels = movers[:n_del]
        movers = movers[n_del:]
        if len(dels) < n_del:
            taken = set(dels)
            rest = [i for i in live if i not in taken]
            pick = rng.choice(len(rest), size=n_del - len(dels), replace=False)
            dels += [rest[i] for i in np.sort(pick)]
        dels = sorted(dels)
        gone = set(dels)
        ins = pool_ids[e * per_epoch:(e + 1) * per_epoch].tolist()
        live = [i for i in live if i not in gone] + ins
        wl.epochs.append(Epoch(dels, ins))
    return wl
