"""Point cloud container, voxel downsampling and normal estimation."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike, NDArray

from fflogo.index import NeighborIndex
from fflogo.transform import RigidTransform

NORMAL_TOL = 1e-6


def _frozen(a: NDArray | None) -> NDArray | None:
    if a is not None:
        a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points in meters, with optional unit normals.

    ``normal_valid`` marks normals that could be estimated; points whose
    neighborhood was degenerate keep a unit placeholder normal and a False flag.
    """

    points: NDArray[np.float64]
    normals: NDArray[np.float64] | None = None
    normal_valid: NDArray[np.bool_] | None = None

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        nrm = None
        valid = None
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError(f"normals shape {nrm.shape} does not match points {pts.shape}")
            norms = np.linalg.norm(nrm, axis=1)
            if not np.all(np.abs(norms - 1.0) <= NORMAL_TOL):
                raise ValueError("normals must be unit length")
            if self.normal_valid is None:
                valid = np.ones(len(pts), dtype=bool)
            else:
                valid = np.array(self.normal_valid, dtype=bool).reshape(-1)
                if valid.shape[0] != pts.shape[0]:
                    raise ValueError("normal_valid length does not match points")
        elif self.normal_valid is not None:
            raise ValueError("normal_valid given without normals")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "normals", _frozen(nrm))
        object.__setattr__(self, "normal_valid", _frozen(valid))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    @cached_property
    def index(self) -> NeighborIndex:
        return NeighborIndex(self.points)

    def centroid(self) -> NDArray[np.float64]:
        return self.points.mean(axis=0)

    def select(self, indices: ArrayLike) -> PointCloud:
        idx = np.asarray(indices, dtype=np.int64)
        if self.normals is None:
            return PointCloud(self.points[idx])
        return PointCloud(self.points[idx], self.normals[idx], self.normal_valid[idx])

    def transformed(self, T: RigidTransform) -> PointCloud:
        return apply_transform(self, T)

    def without_normals(self) -> PointCloud:
        return PointCloud(self.points)


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    """Map points p -> R p + t and normals n -> R n."""
    pts = T.apply(cloud.points)
    if cloud.normals is None:
        return PointCloud(pts)
    nrm = T.rotate(cloud.normals)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, nrm, cloud.normal_valid)


def build_index(cloud: PointCloud | ArrayLike) -> NeighborIndex:
    if isinstance(cloud, PointCloud):
        return cloud.index
    return NeighborIndex(cloud)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """One point per occupied voxel, at the centroid of the voxel's points.

    The grid is anchored at the coordinate origin, so the result does not
    depend on the cloud's extent and downsampling is idempotent. Output is
    ordered by voxel key. Normals are dropped.
    """
    if not voxel_size > 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    pts = cloud.points
    if len(pts) == 0:
        return PointCloud(pts)
    keys = np.floor(pts / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)
    centroids = np.stack([np.bincount(inverse, weights=pts[:, c], minlength=m) for c in range(3)], axis=1)
    centroids /= counts[:, None]
    # a single-point voxel returns its point bit-for-bit
    single = counts == 1
    if np.any(single):
        owner = np.empty(m, dtype=np.int64)
        owner[inverse] = np.arange(len(pts))
        centroids[single] = pts[owner[single]]
    return PointCloud(centroids)


def estimate_normals(
    cloud: PointCloud,
    k: int = 20,
    viewpoint: ArrayLike | None = None,
    collinear_tol: float = 1e-10,
) -> PointCloud:
    """PCA normals from each point's k nearest neighbors (point included).

    The normal is the covariance eigenvector of the smallest eigenvalue. Normals
    are flipped to face ``viewpoint`` (the cloud centroid by default); when the
    viewpoint lies in the tangent plane, the largest-magnitude component is made
    positive. Neighborhoods whose two largest eigenvalues do not dominate the
    middle one (collinear or coincident points) are flagged invalid.
    """
    if k < 3:
        raise ValueError("k must be at least 3")
    n = len(cloud)
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points for normal estimation, got {n}")
    pts = cloud.points
    _, nbr = cloud.index.knn(pts, k + 1)
    local = pts[nbr]
    local = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()

    scale = np.maximum(evals[:, 2], 0.0)
    valid = (scale > 0.0) & (evals[:, 1] > collinear_tol * scale)

    vp = pts.mean(axis=0) if viewpoint is None else np.asarray(viewpoint, dtype=np.float64)
    facing = np.einsum("ni,ni->n", normals, vp - pts)
    flat = np.abs(facing) <= 1e-12 * (1.0 + np.linalg.norm(vp - pts, axis=1))
    major = normals[np.arange(n), np.argmax(np.abs(normals), axis=1)]
    flip = np.where(flat, major < 0, facing < 0)
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals, valid)
