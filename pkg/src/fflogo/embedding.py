"""Rigid-invariant geometric structure embedding.

Pairwise distances and triplet angles are encoded with interleaved
sinusoids (channel ``2k`` is a sine, ``2k+1`` the matching cosine, with
frequency ``1 / 10000^(2k/d_t)``), projected, and the angular part is
max-pooled over each point's angular neighbors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from fflogo.index import NeighborIndex
from fflogo.pointcloud import PointCloud


@dataclass(frozen=True)
class EmbeddingConfig:
    """Hyperparameters of the structure embedding.

    sigma_d: distance scale in meters.
    sigma_a: angle scale in radians.
    d_t: embedding width (even).
    k_angular: angular neighbors per point.
    """

    sigma_d: float = 0.2
    sigma_a: float = float(np.deg2rad(15.0))
    d_t: int = 64
    k_angular: int = 3

    def __post_init__(self) -> None:
        if not self.sigma_d > 0:
            raise ValueError("sigma_d must be positive")
        if not self.sigma_a > 0:
            raise ValueError("sigma_a must be positive")
        if self.d_t < 2 or self.d_t % 2:
            raise ValueError("d_t must be an even integer >= 2")
        if self.k_angular < 1:
            raise ValueError("k_angular must be >= 1")

    @classmethod
    def for_voxel(cls, voxel_size: float, **overrides) -> EmbeddingConfig:
        """Defaults tied to the voxel size (sigma_d = 4 voxels)."""
        return cls(**{"sigma_d": 4.0 * voxel_size, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class GeometricEmbedding:
    values: NDArray[np.float64]  # (n, n, d_t)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


def _points(cloud: PointCloud | ArrayLike) -> NDArray[np.float64]:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


def sinusoidal(x: NDArray, d_t: int) -> NDArray[np.float64]:
    """Encode scalars ``x`` (any shape) into ``x.shape + (d_t,)`` interleaved channels."""
    k = np.arange(d_t // 2, dtype=np.float64)
    arg = x[..., None] / np.power(10000.0, 2.0 * k / d_t)
    out = np.empty(x.shape + (d_t,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def pairwise_distances(points: NDArray) -> NDArray[np.float64]:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def pairwise_distance_embedding(cloud: PointCloud | ArrayLike, cfg: EmbeddingConfig) -> NDArray[np.float64]:
    pts = _points(cloud)
    if len(pts) == 0:
        raise ValueError("cloud is empty")
    return sinusoidal(pairwise_distances(pts) / cfg.sigma_d, cfg.d_t)


def triplet_angles(points: NDArray, k: int) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Angles between (p_x - p_i) and (p_j - p_i) for the k nearest neighbors x of i.

    Returns ``(angles, undefined)`` of shape (n, n, k). Angles lie in [0, pi];
    entries where either difference vector is zero are set to 0 and flagged.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n <= k:
        raise ValueError(f"need more than k_angular={k} points, got {n}")
    _, nbr = NeighborIndex(pts).knn(pts, k + 1)
    # drop the query itself; with duplicates it may not sit in column 0
    self_col = nbr == np.arange(n)[:, None]
    has_self = self_col.any(axis=1)
    keep = ~self_col
    keep[~has_self, -1] = False
    nbr = nbr[keep].reshape(n, k)

    ref = pts[nbr] - pts[:, None, :]  # (n, k, 3)   p_x - p_i
    anc = pts[None, :, :] - pts[:, None, :]  # (n, n, 3)   p_j - p_i
    cross = np.cross(ref[:, None, :, :], anc[:, :, None, :])  # (n, n, k, 3)
    sin = np.linalg.norm(cross, axis=-1)
    cos = np.einsum("ixc,ijc->ijx", ref, anc)
    angles = np.arctan2(sin, cos)
    undefined = (np.linalg.norm(ref, axis=-1)[:, None, :] == 0.0) | (np.linalg.norm(anc, axis=-1)[:, :, None] == 0.0)
    angles[undefined] = 0.0
    return angles, undefined


def triplet_angular_embedding(
    cloud: PointCloud | ArrayLike,
    cfg: EmbeddingConfig,
    return_undefined: bool = False,
):
    """Sinusoidal angle embedding, shape (n, n, k_angular, d_t)."""
    angles, undefined = triplet_angles(_points(cloud), cfg.k_angular)
    emb = sinusoidal(angles / cfg.sigma_a, cfg.d_t)
    if return_undefined:
        return emb, undefined
    return emb


def geometric_structure_embedding(
    dist_emb: NDArray,
    ang_emb: NDArray,
    W_D: ArrayLike,
    W_A: ArrayLike,
) -> GeometricEmbedding:
    """e_ij = e^D_ij W_D + max_x (e^A_ijx W_A), max taken per channel."""
    dist_emb = np.asarray(dist_emb, dtype=np.float64)
    ang_emb = np.asarray(ang_emb, dtype=np.float64)
    W_D = np.asarray(W_D, dtype=np.float64)
    W_A = np.asarray(W_A, dtype=np.float64)
    if dist_emb.ndim != 3 or dist_emb.shape[0] != dist_emb.shape[1]:
        raise ValueError(f"distance embedding must be (n, n, d), got {dist_emb.shape}")
    n, _, d = dist_emb.shape
    if ang_emb.ndim != 4 or ang_emb.shape[:2] != (n, n) or ang_emb.shape[3] != d:
        raise ValueError(f"angular embedding must be ({n}, {n}, k, {d}), got {ang_emb.shape}")
    if W_D.shape[0] != d or W_A.shape[0] != d or W_D.shape[1] != W_A.shape[1]:
        raise ValueError(f"projection shapes {W_D.shape}, {W_A.shape} do not fit width {d}")
    return GeometricEmbedding(dist_emb @ W_D + np.max(ang_emb @ W_A, axis=2))


def projection_weights(d_t: int, seed: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Deterministic (W_D, W_A) pair, each d_t x d_t, Glorot-scaled."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d_t)
    return rng.normal(0.0, scale, (d_t, d_t)), rng.normal(0.0, scale, (d_t, d_t))


def embed_cloud(
    cloud: PointCloud | ArrayLike,
    cfg: EmbeddingConfig,
    W_D: ArrayLike,
    W_A: ArrayLike,
) -> GeometricEmbedding:
    pts = _points(cloud)
    return geometric_structure_embedding(
        pairwise_distance_embedding(pts, cfg), triplet_angular_embedding(pts, cfg), W_D, W_A
    )
