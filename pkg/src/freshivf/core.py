"""Shared primitives: distances, recall, exact kNN, version bytes and config."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np


class FreshIVFError(Exception):
    """Base class for all index errors."""


class InvalidArgumentError(FreshIVFError, ValueError):
    pass


class NotFoundError(FreshIVFError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "not found"


class ConflictError(FreshIVFError):
    pass


class InvalidStateError(FreshIVFError):
    pass


class OutOfSpaceError(FreshIVFError):
    pass


class CorruptionError(FreshIVFError):
    pass


class FormatError(FreshIVFError, ValueError):
    pass


ELEMENT_TYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}

VERSION_MASK = 0x7F
DELETED_BIT = 0x80
VERSION_MODULUS = 128


def as_vector(v, dim: int | None = None, element_type: str = "float32") -> np.ndarray:
    """Coerce ``v`` to a 1-D array of the index element type, validating shape and finiteness."""
    arr = np.asarray(v)
    if arr.ndim != 1:
        raise InvalidArgumentError(f"expected a 1-D vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise InvalidArgumentError(f"dimension mismatch: expected {dim}, got {arr.shape[0]}")
    if element_type == "float32":
        arr = arr.astype("<f4", copy=False)
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError("vector has non-finite components")
    else:
        if np.issubdtype(arr.dtype, np.floating) and np.any((arr < 0) | (arr > 255) | (arr != np.round(arr))):
            raise InvalidArgumentError("uint8 vectors need integral components in [0, 255]")
        arr = arr.astype("u1", copy=False)
    return arr


def distance(a, b) -> float:
    """Squared Euclidean distance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise InvalidArgumentError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(sq_distances(a[None, :], b)[0])


def sq_distances(matrix, q) -> np.ndarray:
    """Squared distances from every row of ``matrix`` to ``q``.

    Every nearest-neighbour path in the package goes through this function so
    that equal inputs always produce bit-identical distances.
    """
    m = np.asarray(matrix, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != q.shape[0]:
        raise InvalidArgumentError(f"dimension mismatch: {m.shape} vs {q.shape}")
    d = m - q
    return (d * d).sum(axis=1)


def order_by_distance(dists: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` smallest (distance, id) pairs, ascending."""
    n = len(dists)
    if k >= n:
        return np.lexsort((ids, dists))
    # keep everything tied with the k-th distance so the id tie-break is exact
    kth = np.partition(dists, k - 1)[k - 1]
    cand = np.flatnonzero(dists <= kth)
    order = cand[np.lexsort((ids[cand], dists[cand]))]
    return order[:k]


def recall_at_k(result: Iterable[int], ground_truth: Iterable[int]) -> float:
    gt = set(ground_truth)
    if not gt:
        raise InvalidArgumentError("ground truth is empty")
    return len(set(result) & gt) / len(gt)


def brute_force_knn(dataset: Mapping[int, np.ndarray], q, k: int) -> list[int]:
    """Exact k nearest ids, ordered by (distance, id)."""
    if k <= 0:
        raise InvalidArgumentError("k must be positive")
    if k > len(dataset):
        raise InvalidArgumentError(f"k={k} exceeds dataset size {len(dataset)}")
    ids = np.fromiter(dataset.keys(), dtype=np.uint64, count=len(dataset))
    matrix = np.stack([np.asarray(dataset[int(i)]) for i in ids])
    return [int(i) for i in ids[order_by_distance(sq_distances(matrix, q), ids, k)]]


def brute_force_knn_matrix(ids: np.ndarray, matrix: np.ndarray, queries: np.ndarray, k: int) -> list[list[int]]:
    """Batch form of :func:`brute_force_knn` over an id array and a row matrix."""
    k = min(k, len(ids))
    return [[int(i) for i in ids[order_by_distance(sq_distances(matrix, q), ids, k)]] for q in queries]


# Version bytes: low 7 bits reassign counter, high bit tombstone.

def pack_version(version: int, deleted: bool = False) -> int:
    return (version & VERSION_MASK) | (DELETED_BIT if deleted else 0)


def unpack_version(byte: int) -> tuple[int, bool]:
    return byte & VERSION_MASK, bool(byte & DELETED_BIT)


def next_version(version: int) -> int:
    return (version + 1) % VERSION_MODULUS


def is_newer(v_new: int, v_old: int) -> bool:
    """True iff ``v_new`` is ahead of ``v_old`` by 1..64 steps modulo 128."""
    return 1 <= (v_new - v_old) % VERSION_MODULUS <= VERSION_MODULUS // 2


@dataclass
class IndexConfig:
    dim: int = 16
    element_type: str = "float32"
    split_limit: int = 32
    merge_threshold: int = 4
    reassign_range: int = 8
    nprobe: int = 8
    replica_count: int = 2
    replica_distance_ratio: float = 1.2
    block_size: int = 4096
    block_count: int = 1 << 16
    background_workers: int = 1
    deterministic: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dim <= 0:
            raise InvalidArgumentError("dim must be positive")
        if self.element_type not in ELEMENT_TYPES:
            raise InvalidArgumentError(f"element_type must be one of {sorted(ELEMENT_TYPES)}")
        if self.split_limit <= 0 or self.merge_threshold <= 0:
            raise InvalidArgumentError("split_limit and merge_threshold must be positive")
        if self.merge_threshold >= self.split_limit:
            raise InvalidArgumentError("merge_threshold must be below split_limit")
        if self.reassign_range < 0:
            raise InvalidArgumentError("reassign_range must be non-negative")
        if self.nprobe <= 0 or self.replica_count <= 0:
            raise InvalidArgumentError("nprobe and replica_count must be positive")
        if self.replica_count > self.nprobe:
            raise InvalidArgumentError("replica_count must not exceed nprobe")
        if self.replica_distance_ratio < 1.0:
            raise InvalidArgumentError("replica_distance_ratio must be >= 1.0")
        if self.block_size <= 0 or self.block_size & (self.block_size - 1):
            raise InvalidArgumentError("block_size must be a power of two")
        if self.block_count <= 0:
            raise InvalidArgumentError("block_count must be positive")
        if self.background_workers <= 0:
            raise InvalidArgumentError("background_workers must be positive")

    @property
    def dtype(self) -> np.dtype:
        return ELEMENT_TYPES[self.element_type]

    def replace(self, **changes) -> "IndexConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "IndexConfig":
        return cls(**parse_key_values(text, cls))

    @classmethod
    def from_file(cls, path) -> "IndexConfig":
        return cls.from_text(Path(path).read_text())


def parse_key_values(text: str, schema) -> dict:
    """Parse flat ``key=value`` lines, coercing values to ``schema``'s field types."""
    types = {f.name: f.type for f in dataclasses.fields(schema)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise FormatError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(value, types[key])
    return out


def _coerce(value: str, typ):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if typ == "bool":
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise FormatError(f"not a boolean: {value!r}")
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    return value


# fvecs / bvecs

def write_vectors(path, vectors: np.ndarray, element_type: str = "float32") -> None:
    vectors = np.asarray(vectors)
    dtype = ELEMENT_TYPES[element_type]
    with open(path, "wb") as fh:
        for row in vectors:
            fh.write(struct.pack("<I", len(row)))
            fh.write(np.asarray(row, dtype=dtype).tobytes())


def read_vectors(path, element_type: str = "float32") -> np.ndarray:
    dtype = ELEMENT_TYPES[element_type]
    raw = Path(path).read_bytes()
    rows = []
    pos = 0
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise FormatError(f"truncated record header at byte {pos}")
        (dim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        end = pos + dim * dtype.itemsize
        if end > len(raw):
            raise FormatError(f"truncated record body at byte {pos}")
        rows.append(np.frombuffer(raw, dtype=dtype, count=dim, offset=pos))
        pos = end
    if not rows:
        return np.empty((0, 0), dtype=dtype)
    if len({len(r) for r in rows}) != 1:
        raise FormatError("records have differing dimensions")
    return np.stack(rows)


def sq_distance_matrix(A, B) -> np.ndarray:
    """Pairwise squared distances, rows of ``A`` against rows of ``B``.

    Row ``i`` equals ``sq_distances(B, A[i])`` bit for bit.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    d = A[:, None, :] - B[None, :, :]
    return (d * d).sum(axis=2)


def nearest_rows(X, C, k: int = 1, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """The ``k`` nearest rows of ``C`` for every row of ``X``: ``(columns, distances)``.

    Candidates come from the fast ``|x|^2 - 2x.c + |c|^2`` expansion with a
    generous tolerance, then get rescored with :func:`sq_distances`
    arithmetic, so the result is exact and ties go to the lower column.
    """
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if X.ndim != 2 or C.ndim != 2 or X.shape[1] != C.shape[1]:
        raise InvalidArgumentError(f"dimension mismatch: {X.shape} vs {C.shape}")
    k = min(k, len(C))
    cols = np.empty((len(X), k), dtype=np.int64)
    dists = np.empty((len(X), k))
    if k == 0 or len(X) == 0:
        return cols, dists
    cn = (C * C).sum(axis=1)
    for start in range(0, len(X), chunk):
        x = X[start:start + chunk]
        xn = (x * x).sum(axis=1)
        approx = xn[:, None] - 2.0 * (x @ C.T) + cn[None, :]
        kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
        tol = 1e-9 * (xn + cn.max()) + 1e-12
        rows, cand = np.nonzero(approx <= (kth + tol)[:, None])
        d = x[rows] - C[cand]
        exact = (d * d).sum(axis=1)
        order = np.lexsort((cand, exact, rows))
        starts = np.searchsorted(rows[order], np.arange(len(x)))
        take = order[starts[:, None] + np.arange(k)[None, :]]
        cols[start:start + len(x)] = cand[take]
        dists[start:start + len(x)] = exact[take]
    return cols, dists
