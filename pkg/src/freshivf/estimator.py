"""scikit-learn style wrapper around :class:`~freshivf.engine.LireEngine`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import IndexConfig, InvalidArgumentError, sq_distance_matrix
from .engine import LireEngine


class LireIndex(BaseEstimator):
    """Updatable approximate nearest-neighbour index.

    ``fit`` builds a balanced index over ``X``; ``partial_fit`` inserts more
    rows and ``delete`` removes ids, with local rebalancing behind both.
    ``kneighbors`` answers queries. Vector ids default to row positions
    continuing from the largest id seen so far.
    """

    def __init__(self, split_limit=32, merge_threshold=4, reassign_range=8, nprobe=8, replica_count=2,
                 replica_distance_ratio=1.2, element_type="float32", block_size=4096, block_count=1 << 16,
                 mode="lire", deterministic=True, background_workers=1):
        self.split_limit = split_limit
        self.merge_threshold = merge_threshold
        self.reassign_range = reassign_range
        self.nprobe = nprobe
        self.replica_count = replica_count
        self.replica_distance_ratio = replica_distance_ratio
        self.element_type = element_type
        self.block_size = block_size
        self.block_count = block_count
        self.mode = mode
        self.deterministic = deterministic
        self.background_workers = background_workers

    def _config(self, dim: int) -> IndexConfig:
        return IndexConfig(
            dim=dim, element_type=self.element_type, split_limit=self.split_limit,
            merge_threshold=self.merge_threshold, reassign_range=self.reassign_range, nprobe=self.nprobe,
            replica_count=self.replica_count, replica_distance_ratio=self.replica_distance_ratio,
            block_size=self.block_size, block_count=self.block_count,
            background_workers=self.background_workers, deterministic=self.deterministic,
        )

    def _check_X(self, X, reset: bool):
        dtype = np.float32 if self.element_type == "float32" else np.uint8
        X = check_array(X, dtype=None)
        if self.element_type == "uint8" and (np.any(X < 0) or np.any(X > 255) or np.any(X != np.round(X))):
            raise InvalidArgumentError("uint8 indexes need integral values in [0, 255]")
        X = X.astype(dtype)
        if reset:
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise InvalidArgumentError(f"X has {X.shape[1]} features, the index has {self.n_features_in_}")
        return X

    def _ids(self, ids, n):
        if ids is None:
            start = getattr(self, "next_id_", 0)
            return np.arange(start, start + n, dtype=np.int64)
        ids = np.asarray(ids, dtype=np.int64).ravel()
        if len(ids) != n:
            raise InvalidArgumentError("ids and X have different lengths")
        if np.any(ids < 0):
            raise InvalidArgumentError("ids must be non-negative")
        return ids

    def fit(self, X, y=None, ids=None):
        X = self._check_X(X, reset=True)
        ids = self._ids(ids, len(X)) if ids is not None else np.arange(len(X), dtype=np.int64)
        if getattr(self, "engine_", None) is not None:
            self.engine_.close()
        self.engine_ = LireEngine.build(ids, X, self._config(X.shape[1]), mode=self.mode)
        self.next_id_ = int(ids.max()) + 1
        return self

    def partial_fit(self, X, y=None, ids=None):
        """Insert rows; builds the index first if it does not exist yet."""
        if getattr(self, "engine_", None) is None:
            return self.fit(X, ids=ids)
        X = self._check_X(X, reset=False)
        ids = self._ids(ids, len(X))
        for vid, v in zip(ids.tolist(), X):
            self.engine_.insert(vid, v)
        if self.deterministic:
            self.engine_.drain_background()
        self.next_id_ = max(self.next_id_, int(ids.max()) + 1 if len(ids) else 0)
        return self

    def delete(self, ids):
        check_is_fitted(self, "engine_")
        for vid in np.asarray(ids, dtype=np.int64).ravel().tolist():
            self.engine_.delete(vid)
        if self.deterministic:
            self.engine_.drain_background()
        return self

    def kneighbors(self, X, n_neighbors: int = 10, return_distance: bool = True, nprobe: int | None = None):
        """Squared distances and ids of the approximate nearest neighbours.

        Rows with fewer than ``n_neighbors`` live results are padded with
        id -1 and distance ``inf``.
        """
        check_is_fitted(self, "engine_")
        X = self._check_X(X, reset=False)
        ind = np.full((len(X), n_neighbors), -1, dtype=np.int64)
        dist = np.full((len(X), n_neighbors), np.inf)
        for i, q in enumerate(X):
            res = self.engine_.search(q, n_neighbors, nprobe=nprobe)
            ind[i, :len(res.ids)] = res.ids
            dist[i, :len(res.ids)] = res.distances
        return (dist, ind) if return_distance else ind

    def predict(self, X):
        """Primary posting id for each row."""
        check_is_fitted(self, "engine_")
        X = self._check_X(X, reset=False)
        return np.array([self.engine_.assign_replicas(x)[0] for x in X], dtype=np.int64)

    def transform(self, X):
        """Squared distances to every live centroid, columns in :attr:`posting_ids_` order."""
        check_is_fitted(self, "engine_")
        X = self._check_X(X, reset=False)
        _, C = self.engine_.centroids.live_view()
        return sq_distance_matrix(X, C)

    @property
    def posting_ids_(self) -> np.ndarray:
        check_is_fitted(self, "engine_")
        return self.engine_.centroids.live_view()[0].astype(np.int64)

    def __del__(self):
        eng = getattr(self, "engine_", None)
        if eng is not None:
            eng.close()
