"""Append-optimized posting store over a fixed-size block device.

Each block holds a whole number of fixed-width posting entries followed by
zero padding and a 4-byte CRC32 trailer. Postings are never rewritten in
place: APPEND copies the partially filled last block into freshly allocated
blocks and swaps the block-map entry, PUT writes a whole posting to fresh
blocks. Replaced blocks go to a pre-release set and only become allocatable
after :meth:`PostingStore.promote_pre_release`.
"""

from __future__ import annotations

import heapq
import os
import struct
import threading
import zlib
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple, Sequence

import numpy as np

from .core import (
    ELEMENT_TYPES,
    ConflictError,
    CorruptionError,
    FormatError,
    InvalidArgumentError,
    NotFoundError,
    OutOfSpaceError,
)

CRC_BYTES = 4
MAGIC = b"BMAP"
FORMAT_VERSION = 1


def entry_dtype(dim: int, element_type: str = "float32") -> np.dtype:
    """Packed record layout: vector id u64, version byte, raw vector."""
    return np.dtype([("id", "<u8"), ("version", "u1"), ("vector", ELEMENT_TYPES[element_type], (dim,))])


def make_entries(ids, versions, vectors, dim: int, element_type: str = "float32") -> np.ndarray:
    ids = np.atleast_1d(np.asarray(ids, dtype=np.uint64))
    out = np.empty(len(ids), dtype=entry_dtype(dim, element_type))
    out["id"] = ids
    out["version"] = versions
    out["vector"] = np.asarray(vectors).reshape(len(ids), dim)
    return out


class BlockDevice:
    """Whole-block reads and writes addressed by block offset.

    Backed by a dict of blocks in memory, or by a flat file of
    ``block_count * block_size`` bytes. Counts every block I/O; with
    ``trace=True`` also records ``(op, offset)`` pairs.
    """

    def __init__(self, block_size: int = 4096, block_count: int = 1 << 16, path=None, trace: bool = False):
        if block_size <= 0 or block_size & (block_size - 1):
            raise InvalidArgumentError("block_size must be a power of two")
        self.block_size = block_size
        self.block_count = block_count
        self.path = path
        self.reads = 0
        self.writes = 0
        self.trace: list[tuple[str, int]] | None = [] if trace else None
        self._lock = threading.Lock()
        self._blocks: dict[int, bytes] = {}
        self._fd = None
        self._pool = None
        if path is not None:
            self._fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
            if os.fstat(self._fd).st_size < block_size * block_count:
                os.ftruncate(self._fd, block_size * block_count)

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _check(self, offset):
        if not 0 <= offset < self.block_count:
            raise InvalidArgumentError(f"block offset {offset} out of range")

    def _count(self, op, offsets):
        with self._lock:
            if op == "r":
                self.reads += len(offsets)
            else:
                self.writes += len(offsets)
            if self.trace is not None:
                self.trace.extend((op, o) for o in offsets)

    def _read_one(self, offset: int) -> bytes:
        if self._fd is None:
            return self._blocks.get(offset, bytes(self.block_size))
        data = os.pread(self._fd, self.block_size, offset * self.block_size)
        return data.ljust(self.block_size, b"\0")

    def read_block(self, offset: int) -> bytes:
        return self.read_blocks([offset])[0]

    def read_blocks(self, offsets: Sequence[int]) -> list[bytes]:
        for o in offsets:
            self._check(o)
        self._count("r", offsets)
        if self._fd is not None and len(offsets) > 1:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=8)
            return list(self._pool.map(self._read_one, offsets))
        return [self._read_one(o) for o in offsets]

    def write_block(self, offset: int, data: bytes) -> None:
        self._check(offset)
        if len(data) != self.block_size:
            raise InvalidArgumentError("block writes must be exactly one block")
        self._count("w", [offset])
        if self._fd is None:
            self._blocks[offset] = bytes(data)
        else:
            os.pwrite(self._fd, data, offset * self.block_size)

    def sync(self):
        if self._fd is not None:
            os.fsync(self._fd)

    def counters(self) -> dict[str, int]:
        with self._lock:
            return {"block_reads": self.reads, "block_writes": self.writes}


class BlockMapEntry(NamedTuple):
    posting_id: int
    entry_count: int
    block_offsets: tuple[int, ...]


class FreeBlockPool:
    """Allocator handing out the lowest free offsets first.

    Offsets at or above ``watermark`` have never been handed out and are
    implicitly free; ``_heap`` holds returned offsets below it.
    """

    def __init__(self, block_count: int):
        self.block_count = block_count
        self.watermark = 0
        self._heap: list[int] = []
        self._returned: set[int] = set()
        self.pre_release: set[int] = set()

    def __len__(self):
        return len(self._returned) + self.block_count - self.watermark

    @property
    def free(self) -> set[int]:
        return self._returned | set(range(self.watermark, self.block_count))

    def allocate(self, n: int) -> list[int]:
        if n > len(self):
            raise OutOfSpaceError(f"need {n} blocks, {len(self)} free")
        out = []
        for _ in range(n):
            if self._heap and self._heap[0] < self.watermark:
                o = heapq.heappop(self._heap)
                self._returned.discard(o)
            else:
                o = self.watermark
                self.watermark += 1
            out.append(o)
        return out

    def give_back(self, offsets) -> None:
        for o in offsets:
            if o in self._returned or o >= self.watermark:
                raise ConflictError(f"block {o} freed twice")
            self._returned.add(o)
            heapq.heappush(self._heap, o)

    def load(self, free_offsets, block_count: int, used) -> None:
        self.block_count = block_count
        self.watermark = max(used, default=-1) + 1
        self._returned = {o for o in free_offsets if o < self.watermark}
        self._heap = sorted(self._returned)
        self.pre_release = set()


class PostingStore:
    """Block controller: block map, free pool, and posting operations."""

    def __init__(self, device: BlockDevice, dim: int, element_type: str = "float32", defer_release: bool = True):
        self.device = device
        self.dim = dim
        self.element_type = element_type
        self.dtype = entry_dtype(dim, element_type)
        self.width = self.dtype.itemsize
        self.payload = device.block_size - CRC_BYTES
        self.per_block = self.payload // self.width
        if self.per_block < 1:
            raise InvalidArgumentError(
                f"entry width {self.width} does not fit a {device.block_size}-byte block")
        self.defer_release = defer_release
        self.pool = FreeBlockPool(device.block_count)
        self._map: dict[int, BlockMapEntry] = {}
        self._lock = threading.Lock()
        # grace-period reclamation: blocks retired at generation g are freed
        # once no reader that started before g is still running
        self._gen = 0
        self._readers: Counter = Counter()
        self._limbo: list[tuple[int, list[int]]] = []

    # -- introspection

    def __contains__(self, posting_id):
        return posting_id in self._map

    def posting_ids(self) -> list[int]:
        return sorted(self._map)

    def entry(self, posting_id: int) -> BlockMapEntry:
        try:
            return self._map[posting_id]
        except KeyError:
            raise NotFoundError(f"posting {posting_id} not found") from None

    def entry_count(self, posting_id: int) -> int:
        return self.entry(posting_id).entry_count

    def blocks_for(self, n_entries: int) -> int:
        return -(-n_entries // self.per_block)

    @property
    def pre_release(self) -> set[int]:
        return self.pool.pre_release

    def check_conservation(self) -> None:
        """Raise AssertionError unless every block is in exactly one place."""
        with self._lock:
            seen: Counter = Counter()
            for e in self._map.values():
                seen.update(e.block_offsets)
            seen.update(self.pool.free)
            seen.update(self.pool.pre_release)
            for _, batch in self._limbo:
                seen.update(batch)
        dup = [o for o, c in seen.items() if c > 1]
        assert not dup, f"blocks in more than one set: {dup[:10]}"
        assert set(seen) == set(range(self.device.block_count)), "blocks missing from every set"

    # -- encoding

    def _encode(self, entries: np.ndarray) -> list[bytes]:
        raw = np.ascontiguousarray(entries, dtype=self.dtype).tobytes()
        step = self.per_block * self.width
        blocks = []
        for start in range(0, len(raw), step):
            body = raw[start:start + step].ljust(self.payload, b"\0")
            blocks.append(body + struct.pack("<I", zlib.crc32(body)))
        return blocks

    def _payload(self, block: bytes, offset: int, n_entries: int) -> bytes:
        body = block[:self.payload]
        (crc,) = struct.unpack_from("<I", block, self.payload)
        if zlib.crc32(body) != crc:
            raise CorruptionError(f"checksum mismatch in block {offset}")
        return body[:n_entries * self.width]

    def _decode(self, e: BlockMapEntry, blocks: list[bytes]) -> np.ndarray:
        if len(blocks) != self.blocks_for(e.entry_count):
            raise CorruptionError(f"posting {e.posting_id}: block count does not match entry count")
        parts = []
        left = e.entry_count
        for off, block in zip(e.block_offsets, blocks):
            n = min(left, self.per_block)
            parts.append(self._payload(block, off, n))
            left -= n
        return np.frombuffer(b"".join(parts), dtype=self.dtype).copy()

    # -- reader registration

    def _begin_read(self) -> int:
        with self._lock:
            g = self._gen
            self._readers[g] += 1
            return g

    def _end_read(self, g: int) -> None:
        with self._lock:
            self._readers[g] -= 1
            if not self._readers[g]:
                del self._readers[g]
            self._reclaim_locked()

    def _retire_locked(self, offsets) -> None:
        offsets = list(offsets)
        if not offsets:
            return
        if self.defer_release:
            self.pool.pre_release.update(offsets)
        else:
            self._gen += 1
            self._limbo.append((self._gen, offsets))
            self._reclaim_locked()

    def _reclaim_locked(self) -> None:
        if not self._limbo:
            return
        oldest = min(self._readers, default=None)
        keep = []
        for gen, batch in self._limbo:
            if oldest is None or oldest >= gen:
                self.pool.give_back(batch)
            else:
                keep.append((gen, batch))
        self._limbo = keep

    # -- posting API

    def get(self, posting_id: int) -> np.ndarray:
        g = self._begin_read()
        try:
            e = self.entry(posting_id)
            return self._decode(e, self.device.read_blocks(e.block_offsets))
        finally:
            self._end_read(g)

    def parallel_get(self, posting_ids: Sequence[int], missing: str = "raise") -> list:
        """Fetch several postings with one batched device read.

        With ``missing="skip"`` unknown ids yield ``None``; otherwise a
        :class:`NotFoundError` naming them is raised whose ``partial``
        attribute still carries every posting that was found.
        """
        if not posting_ids:
            return []
        g = self._begin_read()
        try:
            entries = [self._map.get(p) for p in posting_ids]
            offsets = [o for e in entries if e is not None for o in e.block_offsets]
            blocks = iter(self.device.read_blocks(offsets))
            out = []
            for e in entries:
                if e is None:
                    out.append(None)
                else:
                    out.append(self._decode(e, [next(blocks) for _ in e.block_offsets]))
        finally:
            self._end_read(g)
        absent = [p for p, e in zip(posting_ids, entries) if e is None]
        if absent and missing == "raise":
            err = NotFoundError(f"postings not found: {absent}")
            err.partial = out
            err.missing = absent
            raise err
        return out

    def append(self, posting_id: int, new_entries: np.ndarray) -> int:
        """Append entries to a posting's tail; returns the new entry count."""
        with self._lock:
            old = self.entry(posting_id)
        n = len(new_entries)
        if n == 0:
            return old.entry_count
        new_entries = np.asarray(new_entries, dtype=self.dtype)
        tail_n = old.entry_count % self.per_block
        kept = old.block_offsets[:-1] if tail_n else old.block_offsets
        merged = new_entries
        if tail_n:
            last = old.block_offsets[-1]
            g = self._begin_read()
            try:
                (block,) = self.device.read_blocks([last])
            finally:
                self._end_read(g)
            tail = np.frombuffer(self._payload(block, last, tail_n), dtype=self.dtype)
            merged = np.concatenate([tail, new_entries])
        blocks = self._encode(merged)
        with self._lock:
            fresh = self.pool.allocate(len(blocks))
        for off, data in zip(fresh, blocks):
            self.device.write_block(off, data)
        new = BlockMapEntry(posting_id, old.entry_count + n, tuple(kept) + tuple(fresh))
        with self._lock:
            if self._map.get(posting_id) is not old:
                self.pool.give_back(fresh)
                raise ConflictError(f"posting {posting_id} changed during append")
            self._map[posting_id] = new
            if tail_n:
                self._retire_locked([old.block_offsets[-1]])
        return new.entry_count

    def put(self, posting_id: int, entries: np.ndarray) -> None:
        entries = np.asarray(entries, dtype=self.dtype)
        blocks = self._encode(entries)
        with self._lock:
            fresh = self.pool.allocate(len(blocks))
        for off, data in zip(fresh, blocks):
            self.device.write_block(off, data)
        with self._lock:
            old = self._map.get(posting_id)
            self._map[posting_id] = BlockMapEntry(posting_id, len(entries), tuple(fresh))
            if old is not None:
                self._retire_locked(old.block_offsets)

    def delete_posting(self, posting_id: int) -> None:
        with self._lock:
            old = self._map.pop(posting_id, None)
            if old is None:
                raise NotFoundError(f"posting {posting_id} not found")
            self._retire_locked(old.block_offsets)

    def promote_pre_release(self) -> None:
        """Make blocks released since the last snapshot allocatable."""
        with self._lock:
            batch = sorted(self.pool.pre_release)
            self.pool.pre_release = set()
            if batch:
                self._gen += 1
                self._limbo.append((self._gen, batch))
            self._reclaim_locked()

    # -- persistence

    def store_snapshot(self) -> bytes:
        """Serialize the block map and every block it does not reference.

        Blocks still waiting in pre-release are written out as free: the map
        in this snapshot no longer points at them.
        """
        with self._lock:
            entries = [self._map[p] for p in sorted(self._map)]
            free = set(self.pool.free) | self.pool.pre_release
            for _, batch in self._limbo:
                free.update(batch)
        body = bytearray(MAGIC)
        body += struct.pack("<IIQQ", FORMAT_VERSION, self.device.block_size, self.device.block_count, len(entries))
        for e in entries:
            body += struct.pack("<QII", e.posting_id, e.entry_count, len(e.block_offsets))
            body += struct.pack(f"<{len(e.block_offsets)}Q", *e.block_offsets)
        free = sorted(free)
        body += struct.pack("<Q", len(free))
        body += np.asarray(free, dtype="<u8").tobytes()
        body += struct.pack("<I", zlib.crc32(body))
        return bytes(body)

    @classmethod
    def restore(cls, device: BlockDevice, data: bytes, dim: int, element_type: str = "float32",
                defer_release: bool = True) -> "PostingStore":
        if len(data) < 36 or data[:4] != MAGIC:
            raise FormatError("not a block-map snapshot")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise FormatError("block-map snapshot checksum mismatch")
        version, block_size, block_count, n = struct.unpack_from("<IIQQ", body, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported block-map version {version}")
        if block_size != device.block_size or block_count != device.block_count:
            raise FormatError("block-map snapshot does not match the device geometry")
        store = cls(device, dim, element_type, defer_release)
        pos = 28
        try:
            for _ in range(n):
                pid, count, nblocks = struct.unpack_from("<QII", body, pos)
                pos += 16
                offsets = struct.unpack_from(f"<{nblocks}Q", body, pos)
                pos += 8 * nblocks
                store._map[pid] = BlockMapEntry(pid, count, tuple(offsets))
            (nfree,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            free = np.frombuffer(body, dtype="<u8", count=nfree, offset=pos).tolist()
            pos += 8 * nfree
        except (struct.error, ValueError) as exc:
            raise FormatError(f"truncated block-map snapshot: {exc}") from None
        if pos != len(body):
            raise FormatError("trailing bytes in block-map snapshot")
        used = [o for e in store._map.values() for o in e.block_offsets]
        store.pool.load(free, block_count, used)
        store.check_conservation()
        return store
