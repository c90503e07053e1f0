"""k-NN and radius queries with brute-force-identical results.

``scipy.spatial.cKDTree`` does the candidate search; distances are then
recomputed with one fixed formula and candidates are ordered by
``(distance, index)``, so results match a linear scan exactly, including the
lowest-index rule on distance ties.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

_TIE_RTOL = 1e-12


def exact_distances(points: NDArray, query: NDArray) -> NDArray[np.float64]:
    """Euclidean distances from one query to many points (the reference formula)."""
    diff = points - query
    return np.sqrt(np.sum(diff * diff, axis=-1))


class NeighborIndex:
    """Immutable spatial index over an (N, 3) point array.

    Queries are read-only and safe to share between threads.
    """

    def __init__(self, points: ArrayLike):
        pts = np.array(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
        if pts.shape[0] == 0:
            raise ValueError("cannot index an empty cloud")
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def knn(self, queries: ArrayLike, k: int) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
        """The ``k`` nearest points for each query.

        Returns ``(distances, indices)`` of shape (Q, k), sorted by distance then
        index. ``k`` is clipped to the cloud size.
        """
        q = np.asarray(queries, dtype=np.float64)
        single = q.ndim == 1
        q = np.atleast_2d(q)
        n = len(self)
        if k < 1:
            raise ValueError("k must be >= 1")
        k = min(k, n)
        k_eff = min(k + 1, n)
        _, idx = self._tree.query(q, k=k_eff)
        idx = np.asarray(idx, dtype=np.int64).reshape(q.shape[0], k_eff)
        diff = self.points[idx] - q[:, None, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        order = np.lexsort((idx, dist), axis=-1)
        dist = np.take_along_axis(dist, order, axis=1)
        idx = np.take_along_axis(idx, order, axis=1)

        if k_eff > k:
            # a tie straddling the k-th slot may hide a lower-index point the tree skipped
            boundary = dist[:, k] - dist[:, k - 1] <= _TIE_RTOL * (1.0 + dist[:, k - 1])
            for row in np.flatnonzero(boundary):
                d_row, i_row = self._ball_sorted(q[row], dist[row, k - 1])
                dist[row, :k] = d_row[:k]
                idx[row, :k] = i_row[:k]
        dist, idx = dist[:, :k], idx[:, :k]
        if single:
            return dist[0], idx[0]
        return dist, idx

    def nearest(self, queries: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
        d, i = self.knn(queries, 1)
        return d[..., 0], i[..., 0]

    def radius(self, query: ArrayLike, r: float) -> NDArray[np.int64]:
        """Indices of all points with distance <= r, sorted by (distance, index)."""
        if r < 0:
            raise ValueError("radius must be non-negative")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        d, i = self._ball_sorted(q, r)
        keep = d <= r
        return i[keep]

    def radius_many(self, queries: ArrayLike, r: float) -> list[NDArray[np.int64]]:
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        return [self.radius(row, r) for row in q]

    def _ball_sorted(self, q: NDArray, r: float) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
        slack = r * (1.0 + 1e-9) + 1e-12
        cand = np.asarray(self._tree.query_ball_point(q, slack), dtype=np.int64)
        d = exact_distances(self.points[cand], q)
        order = np.lexsort((cand, d))
        return d[order], cand[order]


def build_index(points: ArrayLike) -> NeighborIndex:
    return NeighborIndex(points)
