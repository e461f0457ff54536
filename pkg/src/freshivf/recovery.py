"""Crash recovery: write-ahead log of foreground updates plus periodic snapshots.

On-disk layout of a durable index directory::

    device.bin              posting blocks
    wal.log                 update records since the last snapshot
    snap-<id>/centroids.bin
    snap-<id>/versions.bin
    snap-<id>/blockmap.bin  block map and free pool
    snap-<id>/manifest.bin  written last; a snapshot without it does not exist
"""

from __future__ import annotations

import os
import shutil
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .centroid_index import CentroidIndex
from .core import (
    ELEMENT_TYPES,
    ConflictError,
    CorruptionError,
    FormatError,
    IndexConfig,
    InvalidArgumentError,
    InvalidStateError,
    NotFoundError,
    as_vector,
)
from .engine import LireEngine, VersionMap
from .storage import BlockDevice, PostingStore

OP_INSERT = 0
OP_DELETE = 1

_HEAD = struct.Struct("<QBQI")  # sequence, op, vector id, dim
_CRC = struct.Struct("<I")

DEVICE_FILE = "device.bin"
WAL_FILE = "wal.log"
COMPONENTS = ("centroids.bin", "versions.bin", "blockmap.bin")
MANIFEST_FILE = "manifest.bin"
MANIFEST_MAGIC = b"SNAP"

# points at which take_snapshot consults its fault hook, in order
SNAPSHOT_STAGES = ("start", "centroids", "versions", "blockmap", "manifest_partial", "manifest",
                   "promoted", "wal_truncated")


class WalRecord(NamedTuple):
    sequence: int
    op: int
    vector_id: int
    payload: bytes = b""
    dim: int = 0

    @classmethod
    def insert(cls, sequence: int, vector_id: int, vector: np.ndarray) -> "WalRecord":
        vector = np.ascontiguousarray(vector, dtype=vector.dtype.newbyteorder("<"))
        return cls(sequence, OP_INSERT, vector_id, vector.tobytes(), len(vector))

    @classmethod
    def delete(cls, sequence: int, vector_id: int) -> "WalRecord":
        return cls(sequence, OP_DELETE, vector_id)

    def encode(self) -> bytes:
        body = _HEAD.pack(self.sequence, self.op, self.vector_id, self.dim) + self.payload
        return body + _CRC.pack(zlib.crc32(body))

    def vector(self, element_type: str = "float32") -> np.ndarray:
        return np.frombuffer(self.payload, dtype=ELEMENT_TYPES[element_type], count=self.dim)


def decode_records(data: bytes, element_type: str = "float32") -> tuple[list[WalRecord], int]:
    """Parse a WAL image. Returns the valid prefix and its length in bytes.

    Parsing stops at the first torn, corrupt or out-of-sequence record;
    it and everything after it are ignored.
    """
    itemsize = ELEMENT_TYPES[element_type].itemsize
    out: list[WalRecord] = []
    pos = 0
    while pos + _HEAD.size + _CRC.size <= len(data):
        seq, op, vid, dim = _HEAD.unpack_from(data, pos)
        if op not in (OP_INSERT, OP_DELETE) or (op == OP_DELETE and dim):
            break
        end = pos + _HEAD.size + dim * itemsize
        if end + _CRC.size > len(data):
            break
        (crc,) = _CRC.unpack_from(data, end)
        if zlib.crc32(data[pos:end]) != crc:
            break
        if out and seq != out[-1].sequence + 1:
            break
        out.append(WalRecord(seq, op, vid, bytes(data[pos + _HEAD.size:end]), dim))
        pos = end + _CRC.size
    return out, pos


class WriteAheadLog:
    """Append-only record file with strictly consecutive sequence numbers.

    Opening an existing log drops any torn tail so later appends follow the
    last good record.
    """

    def __init__(self, path, element_type: str = "float32", sync: bool = True):
        self.path = Path(path)
        self.element_type = element_type
        self.sync = sync
        self._lock = threading.Lock()
        data = self.path.read_bytes() if self.path.exists() else b""
        records, good = decode_records(data, element_type)
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        if good != len(data):
            os.ftruncate(self._fd, good)
        os.lseek(self._fd, 0, os.SEEK_END)
        self._first = records[0].sequence if records else None
        self.last_sequence = records[-1].sequence if records else 0

    def records(self) -> list[WalRecord]:
        with self._lock:
            return decode_records(self.path.read_bytes(), self.element_type)[0]

    @property
    def first_sequence(self) -> int | None:
        return self._first

    def append(self, record: WalRecord) -> None:
        with self._lock:
            if self._fd is None:
                raise InvalidStateError("write-ahead log is closed")
            if record.sequence != self.last_sequence + 1:
                raise InvalidStateError(f"sequence gap: expected {self.last_sequence + 1}, got {record.sequence}")
            os.write(self._fd, record.encode())
            if self.sync:
                os.fsync(self._fd)
            if self._first is None:
                self._first = record.sequence
            self.last_sequence = record.sequence

    def truncate_below(self, sequence: int) -> None:
        """Drop every record with a sequence number below ``sequence``."""
        with self._lock:
            keep = [r for r in decode_records(self.path.read_bytes(), self.element_type)[0] if r.sequence >= sequence]
            tmp = self.path.with_suffix(".tmp")
            tmp.write_bytes(b"".join(r.encode() for r in keep))
            if self.sync:
                with open(tmp, "rb+") as fh:
                    os.fsync(fh.fileno())
            os.replace(tmp, self.path)
            if self._fd is not None:
                os.close(self._fd)
            self._fd = os.open(self.path, os.O_RDWR)
            os.lseek(self._fd, 0, os.SEEK_END)
            self._first = keep[0].sequence if keep else None
            self.last_sequence = max(self.last_sequence, sequence - 1)

    def close(self):
        with self._lock:
            if self._fd is not None:
                os.close(self._fd)
                self._fd = None


def wal_append(wal: WriteAheadLog, record: WalRecord) -> None:
    wal.append(record)


@dataclass
class SnapshotManifest:
    snapshot_id: int
    wal_low_watermark: int
    digests: dict[str, int]
    next_posting_id: int
    config: str

    def encode(self) -> bytes:
        cfg = self.config.encode()
        body = bytearray(MANIFEST_MAGIC)
        body += struct.pack("<IQQQ", 1, self.snapshot_id, self.wal_low_watermark, self.next_posting_id)
        body += struct.pack(f"<{len(COMPONENTS)}I", *(self.digests[c] for c in COMPONENTS))
        body += struct.pack("<I", len(cfg)) + cfg
        return bytes(body + _CRC.pack(zlib.crc32(body)))

    @classmethod
    def decode(cls, data: bytes) -> "SnapshotManifest":
        if len(data) < 8 or data[:4] != MANIFEST_MAGIC:
            raise FormatError("not a snapshot manifest")
        body, (crc,) = data[:-4], _CRC.unpack(data[-4:])
        if zlib.crc32(body) != crc:
            raise FormatError("manifest checksum mismatch")
        try:
            version, sid, low, next_pid = struct.unpack_from("<IQQQ", body, 4)
            digests = struct.unpack_from(f"<{len(COMPONENTS)}I", body, 32)
            pos = 32 + 4 * len(COMPONENTS)
            (n,) = struct.unpack_from("<I", body, pos)
        except struct.error:
            raise FormatError("truncated manifest") from None
        if version != 1 or pos + 4 + n != len(body):
            raise FormatError("malformed manifest")
        cfg = body[pos + 4:].decode()
        return cls(sid, low, dict(zip(COMPONENTS, digests)), next_pid, cfg)


def _write_file(path: Path, data: bytes, sync: bool) -> None:
    with open(path, "wb") as fh:
        fh.write(data)
        fh.flush()
        if sync:
            os.fsync(fh.fileno())


def snapshot_ids(directory) -> list[int]:
    out = []
    for p in Path(directory).glob("snap-*"):
        try:
            out.append(int(p.name[5:]))
        except ValueError:
            continue
    return sorted(out)


def take_snapshot(engine: LireEngine, directory, wal: WriteAheadLog | None = None,
                  fault: Callable[[str], None] | None = None, sync: bool = True) -> SnapshotManifest:
    """Persist the engine's in-memory structures as the next snapshot generation.

    Foreground updates are held off and queued background work is drained
    first, so the three components describe one consistent state. The
    manifest goes last; only then are pre-released blocks handed back to
    the allocator and the log truncated.
    """
    directory = Path(directory)
    hook = fault or (lambda stage: None)
    with engine.quiesce():
        hook("start")
        engine.device.sync()
        existing = snapshot_ids(directory)
        sid = (existing[-1] + 1) if existing else 1
        snap = directory / f"snap-{sid}"
        if snap.exists():
            shutil.rmtree(snap)
        snap.mkdir(parents=True)
        blobs = {
            "centroids.bin": engine.centroids.snapshot_centroids(),
            "versions.bin": engine.versions.snapshot(),
            "blockmap.bin": engine.store.store_snapshot(),
        }
        for name in COMPONENTS:
            _write_file(snap / name, blobs[name], sync)
            hook(name[:-4])
        manifest = SnapshotManifest(
            snapshot_id=sid,
            wal_low_watermark=(wal.last_sequence + 1) if wal is not None else 1,
            digests={n: zlib.crc32(b) for n, b in blobs.items()},
            next_posting_id=engine.next_posting_id,
            config=engine.cfg.to_text(),
        )
        data = manifest.encode()
        with open(snap / MANIFEST_FILE, "wb") as fh:
            fh.write(data[: len(data) // 2])
            fh.flush()
            hook("manifest_partial")
            fh.write(data[len(data) // 2:])
            fh.flush()
            if sync:
                os.fsync(fh.fileno())
        hook("manifest")
        engine.store.promote_pre_release()
        hook("promoted")
        if wal is not None:
            wal.truncate_below(manifest.wal_low_watermark)
        hook("wal_truncated")
        for old in existing:
            shutil.rmtree(directory / f"snap-{old}", ignore_errors=True)
    return manifest


def load_snapshot(snap_dir) -> tuple[SnapshotManifest, dict[str, bytes]]:
    """Read and verify one snapshot generation; raises FormatError if unusable."""
    snap_dir = Path(snap_dir)
    try:
        manifest = SnapshotManifest.decode((snap_dir / MANIFEST_FILE).read_bytes())
        blobs = {n: (snap_dir / n).read_bytes() for n in COMPONENTS}
    except FileNotFoundError as exc:
        raise FormatError(f"incomplete snapshot: {exc.filename}") from None
    for n, b in blobs.items():
        if zlib.crc32(b) != manifest.digests[n]:
            raise FormatError(f"{n} does not match its manifest digest")
    return manifest, blobs


def latest_snapshot(directory, wal_first: int | None = None) -> tuple[SnapshotManifest, dict[str, bytes]]:
    """The newest valid snapshot the log can still bring up to date."""
    for sid in reversed(snapshot_ids(directory)):
        try:
            manifest, blobs = load_snapshot(Path(directory) / f"snap-{sid}")
        except FormatError:
            continue
        if wal_first is not None and wal_first > manifest.wal_low_watermark:
            continue  # records between the snapshot and the log's head are gone
        return manifest, blobs
    raise CorruptionError(f"no usable snapshot in {directory}")


def replay(engine: LireEngine, records, low_watermark: int = 1) -> int:
    """Apply logged updates through the normal paths; returns how many were applied.

    Inserting an id that already exists and deleting one that is not live
    are no-ops, so replaying a log twice is harmless.
    """
    applied = 0
    for r in records:
        if r.sequence < low_watermark:
            continue
        if r.op == OP_INSERT:
            if r.vector_id in engine.versions:
                continue
            engine.insert(r.vector_id, r.vector(engine.cfg.element_type))
        else:
            if not engine.versions.is_live(r.vector_id):
                continue
            engine.delete(r.vector_id)
        applied += 1
        engine.drain_background()
    return applied


def recover(device: BlockDevice, directory, wal: WriteAheadLog, cfg: IndexConfig | None = None,
            mode: str = "lire") -> LireEngine:
    """Rebuild an engine from the newest valid snapshot plus the log tail.

    Replay is single-threaded and deterministic; background workers, if the
    configuration asks for them, start only afterwards.
    """
    manifest, blobs = latest_snapshot(directory, wal.first_sequence)
    saved = IndexConfig.from_text(manifest.config)
    cfg = cfg or saved
    if (cfg.dim, cfg.element_type, cfg.block_size, cfg.block_count) != (
            saved.dim, saved.element_type, saved.block_size, saved.block_count):
        raise InvalidArgumentError("configuration does not match the snapshot's layout")
    store = PostingStore.restore(device, blobs["blockmap.bin"], cfg.dim, cfg.element_type, defer_release=True)
    engine = LireEngine(
        cfg.replace(deterministic=True), mode=mode, store=store,
        centroids=CentroidIndex.restore_centroids(blobs["centroids.bin"], dim=cfg.dim),
        versions=VersionMap.restore(blobs["versions.bin"]),
        next_posting_id=manifest.next_posting_id,
    )
    replay(engine, wal.records(), manifest.wal_low_watermark)
    engine.drain_background()
    if wal.last_sequence < manifest.wal_low_watermark - 1:
        wal.last_sequence = manifest.wal_low_watermark - 1
    if not cfg.deterministic:
        engine.start_workers(cfg.background_workers)
    engine.cfg = cfg
    return engine


class DurableIndex:
    """Crash-safe front end: log before acknowledging, snapshot every ``snapshot_every`` updates.

    Opening a directory that already holds a snapshot recovers it;
    otherwise a fresh empty index is created there.
    """

    def __init__(self, directory, cfg: IndexConfig | None = None, snapshot_every: int = 10_000,
                 sync: bool = True, mode: str = "lire", fault: Callable[[str], None] | None = None,
                 _engine: LireEngine | None = None):
        if snapshot_every <= 0:
            raise InvalidArgumentError("snapshot_every must be positive")
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.snapshot_every = snapshot_every
        self.sync = sync
        self.fault = fault
        self._ack = threading.RLock()
        fresh = not snapshot_ids(self.directory)
        if fresh and cfg is None:
            raise InvalidArgumentError("a new index needs a configuration")
        if not fresh:
            manifest_cfg = IndexConfig.from_text(latest_snapshot(self.directory)[0].config)
            cfg = cfg or manifest_cfg
        self.cfg = cfg
        if _engine is not None:
            self.device = _engine.device
        else:
            self.device = BlockDevice(cfg.block_size, cfg.block_count, path=self.directory / DEVICE_FILE)
        if fresh:
            (self.directory / WAL_FILE).unlink(missing_ok=True)
        self.wal = WriteAheadLog(self.directory / WAL_FILE, cfg.element_type, sync=sync)
        if fresh:
            if _engine is None:
                store = PostingStore(self.device, cfg.dim, cfg.element_type, defer_release=True)
                _engine = LireEngine(cfg, mode=mode, store=store)
            self.engine = _engine
            self.snapshot()
        else:
            self.engine = recover(self.device, self.directory, self.wal, cfg, mode)
        self._since_snapshot = 0

    @classmethod
    def build(cls, directory, ids, vectors, cfg: IndexConfig, mode: str = "lire", **kwargs) -> "DurableIndex":
        """Statically build an index over ``vectors`` into an empty directory."""
        directory = Path(directory)
        if snapshot_ids(directory):
            raise InvalidStateError(f"{directory} already holds an index")
        directory.mkdir(parents=True, exist_ok=True)
        device = BlockDevice(cfg.block_size, cfg.block_count, path=directory / DEVICE_FILE)
        store = PostingStore(device, cfg.dim, cfg.element_type, defer_release=True)
        engine = LireEngine.build(ids, vectors, cfg, store=store, mode=mode)
        return cls(directory, cfg, mode=mode, _engine=engine, **kwargs)

    # -- updates

    def insert(self, vid: int, v) -> int:
        """Log, then apply, one insert. Returns its log sequence number."""
        v = as_vector(v, self.cfg.dim, self.cfg.element_type)
        vid = int(vid)
        with self._ack:
            if vid in self.engine.versions:
                raise ConflictError(f"vector id {vid} already used")
            seq = self.wal.last_sequence + 1
            self.wal.append(WalRecord.insert(seq, vid, v))
            self._hook("logged")
            self.engine.insert(vid, v)
            self._after_update()
            return seq

    def delete(self, vid: int) -> int:
        vid = int(vid)
        with self._ack:
            if not self.engine.versions.is_live(vid):
                raise NotFoundError(f"vector {vid} is not live")
            seq = self.wal.last_sequence + 1
            self.wal.append(WalRecord.delete(seq, vid))
            self._hook("logged")
            self.engine.delete(vid)
            self._after_update()
            return seq

    def _hook(self, stage: str) -> None:
        if self.fault is not None:
            self.fault(stage)

    def _after_update(self) -> None:
        if self.cfg.deterministic:
            self.engine.drain_background()
        self._since_snapshot += 1
        if self._since_snapshot >= self.snapshot_every:
            self.snapshot()

    def snapshot(self) -> SnapshotManifest:
        with self._ack:
            manifest = take_snapshot(self.engine, self.directory, self.wal, fault=self.fault, sync=self.sync)
            self._since_snapshot = 0
            return manifest

    # -- queries

    def search(self, q, k: int, nprobe: int | None = None):
        return self.engine.search(q, k, nprobe=nprobe)

    def live_ids(self) -> set[int]:
        return set(self.engine.versions.live_ids())

    def close(self, snapshot: bool = False) -> None:
        if snapshot:
            self.snapshot()
        self.engine.close()
        self.wal.close()
        self.device.close()

    def abandon(self) -> None:
        """Drop every handle without any further writes, as a crash would."""
        self.engine.close()
        self.wal.close()
        self.device.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
