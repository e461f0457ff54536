"""In-memory routing structure over posting centroids.

Search is an exact scan over the live centroid matrix. Readers never lock:
each write builds a fresh immutable view and publishes it with a single
attribute assignment, so a reader sees one whole generation or the next.
"""

from __future__ import annotations

import struct
import threading
import zlib
from typing import NamedTuple

import numpy as np

from .core import (
    ConflictError,
    FormatError,
    NotFoundError,
    order_by_distance,
    sq_distances,
)

MAGIC = b"CIDX"
FORMAT_VERSION = 1


class CentroidEntry(NamedTuple):
    posting_id: int
    centroid: np.ndarray
    live: bool


class _View(NamedTuple):
    ids: np.ndarray
    matrix: np.ndarray


class CentroidIndex:
    def __init__(self, dim: int):
        self.dim = dim
        self._entries: dict[int, CentroidEntry] = {}
        self._write_lock = threading.Lock()
        self._view = _View(np.empty(0, dtype=np.uint64), np.empty((0, dim), dtype=np.float64))

    def __len__(self):
        return len(self._view.ids)

    def __contains__(self, posting_id):
        e = self._entries.get(posting_id)
        return e is not None and e.live

    @property
    def live_ids(self) -> list[int]:
        return [int(i) for i in self._view.ids]

    def centroid(self, posting_id: int) -> np.ndarray:
        e = self._entries.get(posting_id)
        if e is None or not e.live:
            raise NotFoundError(f"posting {posting_id} has no live centroid")
        return e.centroid

    def get(self, posting_id: int, default=None):
        """Like :meth:`centroid` but returns ``default`` for a removed posting."""
        e = self._entries.get(posting_id)
        return e.centroid if e is not None and e.live else default

    def live_view(self) -> tuple[np.ndarray, np.ndarray]:
        view = self._view
        return view.ids, view.matrix

    def add_centroid(self, posting_id: int, centroid) -> None:
        self.update(add=[(posting_id, centroid)])

    def remove_centroid(self, posting_id: int) -> None:
        self.update(remove=[posting_id])

    def update(self, remove=(), add=()) -> None:
        """Apply removals and additions as one publication."""
        with self._write_lock:
            entries = dict(self._entries)
            for pid in remove:
                e = entries.get(pid)
                if e is None or not e.live:
                    raise NotFoundError(f"posting {pid} has no live centroid")
                entries[pid] = e._replace(live=False)
            for pid, c in add:
                e = entries.get(pid)
                if e is not None and e.live:
                    raise ConflictError(f"posting {pid} already has a live centroid")
                c = np.array(c, dtype=np.float64).reshape(self.dim)
                c.setflags(write=False)
                entries[pid] = CentroidEntry(int(pid), c, True)
            self._publish(entries)

    def _publish(self, entries):
        live = sorted(pid for pid, e in entries.items() if e.live)
        ids = np.array(live, dtype=np.uint64)
        matrix = np.stack([entries[p].centroid for p in live]) if live else np.empty((0, self.dim))
        self._entries = entries
        self._view = _View(ids, matrix)

    def search_centroids(self, q, k: int, exclude=()) -> list[tuple[int, float]]:
        view = self._view
        if len(view.ids) == 0:
            return []
        dists = sq_distances(view.matrix, q)
        ids = view.ids
        if exclude:
            keep = ~np.isin(ids, np.fromiter(exclude, dtype=np.uint64))
            ids, dists = ids[keep], dists[keep]
            if len(ids) == 0:
                return []
        order = order_by_distance(dists, ids, min(k, len(ids)))
        return [(int(ids[i]), float(dists[i])) for i in order]

    def snapshot_centroids(self) -> bytes:
        entries = self._entries
        body = bytearray(MAGIC)
        body += struct.pack("<IQ", FORMAT_VERSION, len(entries))
        for pid in sorted(entries):
            e = entries[pid]
            body += struct.pack("<QBI", pid, int(e.live), self.dim)
            body += np.asarray(e.centroid, dtype="<f8").tobytes()
        body += struct.pack("<I", zlib.crc32(body))
        return bytes(body)

    @classmethod
    def restore_centroids(cls, data: bytes, dim: int | None = None) -> "CentroidIndex":
        """Rebuild an index from :meth:`snapshot_centroids` output.

        An empty snapshot carries no dimension, so ``dim`` is used when given.
        """
        if len(data) < 20 or data[:4] != MAGIC:
            raise FormatError("not a centroid snapshot")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise FormatError("centroid snapshot checksum mismatch")
        version, count = struct.unpack_from("<IQ", body, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported centroid snapshot version {version}")
        pos = 16
        entries = {}
        for _ in range(count):
            if pos + 13 > len(body):
                raise FormatError("truncated centroid snapshot")
            pid, live, edim = struct.unpack_from("<QBI", body, pos)
            pos += 13
            if dim is None:
                dim = edim
            if edim != dim:
                raise FormatError("inconsistent centroid dimensions")
            end = pos + 8 * edim
            if end > len(body):
                raise FormatError("truncated centroid snapshot")
            c = np.frombuffer(body, dtype="<f8", count=edim, offset=pos).astype(np.float64)
            c.setflags(write=False)
            entries[pid] = CentroidEntry(pid, c, bool(live))
            pos = end
        if pos != len(body):
            raise FormatError("trailing bytes in centroid snapshot")
        index = cls(dim if dim is not None else 0)
        index._publish(entries)
        return index
