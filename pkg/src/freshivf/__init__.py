"""Updatable cluster-based vector index with local incremental rebalancing."""

from .centroid_index import CentroidIndex
from .core import (
    ConflictError,
    CorruptionError,
    FormatError,
    FreshIVFError,
    IndexConfig,
    InvalidArgumentError,
    InvalidStateError,
    NotFoundError,
    OutOfSpaceError,
    brute_force_knn,
    distance,
    recall_at_k,
)
from .engine import LireEngine, SearchResult, VersionMap
from .estimator import LireIndex
from .recovery import DurableIndex, WalRecord, WriteAheadLog, recover, take_snapshot, wal_append
from .storage import BlockDevice, PostingStore

__all__ = [
    "BlockDevice", "CentroidIndex", "ConflictError", "CorruptionError", "DurableIndex", "FormatError",
    "FreshIVFError", "IndexConfig", "InvalidArgumentError", "InvalidStateError", "LireEngine", "LireIndex",
    "NotFoundError", "OutOfSpaceError", "PostingStore", "SearchResult", "VersionMap", "WalRecord",
    "WriteAheadLog", "brute_force_knn", "distance", "recall_at_k", "recover", "take_snapshot", "wal_append",
]
