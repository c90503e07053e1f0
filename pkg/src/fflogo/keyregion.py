"""Keypoint selection by farthest point sampling and patch aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from fflogo.pointcloud import PointCloud

MIN_PATCH_SIZE = 10


@dataclass(frozen=True, eq=False)
class KeypointSet:
    indices: NDArray[np.int64]
    points: NDArray[np.float64]
    covering_radius: float

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class Patch:
    keypoint: int  # cloud index of the keypoint
    indices: NDArray[np.int64]
    cloud: PointCloud
    viable: bool

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class PatchSet:
    patches: tuple[Patch, ...]
    aggregation_radius: float
    mode: str = "radius"

    def __len__(self) -> int:
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    def coverage(self, n_points: int) -> float:
        """Fraction of the cloud's points that fall in at least one patch."""
        if not self.patches:
            return 0.0
        covered = np.zeros(n_points, dtype=bool)
        for p in self.patches:
            covered[p.indices] = True
        return float(covered.mean())

    def dump_ply(self, directory: str | Path, prefix: str = "patch") -> list[Path]:
        from fflogo.io import save_cloud

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for n, p in enumerate(self.patches):
            path = directory / f"{prefix}_{n:02d}.ply"
            save_cloud(p.cloud, path)
            paths.append(path)
        return paths


def _sq_dist(points: NDArray, q: NDArray) -> NDArray:
    diff = points - q
    return np.sum(diff * diff, axis=1)


def farthest_point_sample(cloud: PointCloud, n: int) -> KeypointSet:
    """Greedy FPS seeded with the point nearest the geometric centroid.

    Each step adds the unselected point with the largest distance to the
    selected set; ties go to the lowest index. ``covering_radius`` is the
    largest remaining point-to-set distance when sampling stops (0 when every
    point was taken).
    """
    pts = cloud.points
    N = len(pts)
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > N:
        raise ValueError(f"cannot sample {n} keypoints from {N} points")
    first = int(np.argmin(_sq_dist(pts, pts.mean(axis=0))))
    chosen = [first]
    selected = np.zeros(N, dtype=bool)
    selected[first] = True
    d2 = _sq_dist(pts, pts[first])
    for _ in range(n - 1):
        masked = np.where(selected, -np.inf, d2)
        nxt = int(np.argmax(masked))
        chosen.append(nxt)
        selected[nxt] = True
        d2 = np.minimum(d2, _sq_dist(pts, pts[nxt]))
    remaining = d2[~selected]
    cover = float(np.sqrt(remaining.max())) if len(remaining) else 0.0
    idx = np.asarray(chosen, dtype=np.int64)
    return KeypointSet(idx, pts[idx].copy(), cover)


def aggregate_patches(
    cloud: PointCloud,
    keys: KeypointSet,
    radius_factor: float = 1.5,
    mode: str = "radius",
    knn_cap: int = 512,
    min_patch_size: int = MIN_PATCH_SIZE,
) -> PatchSet:
    """Gather the neighborhood of every keypoint.

    ``radius`` mode takes all points within ``covering_radius * radius_factor``;
    ``knn`` mode takes up to ``knn_cap`` nearest points, still bounded by that
    radius. Patches smaller than ``min_patch_size`` are kept but marked not
    viable so the optimizer skips them.
    """
    if not radius_factor > 0:
        raise ValueError("radius_factor must be positive")
    if mode not in ("radius", "knn"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    radius = keys.covering_radius * radius_factor
    index = cloud.index
    patches = []
    for k_idx in keys.indices:
        q = cloud.points[k_idx]
        if mode == "radius":
            members = index.radius(q, radius)
        else:
            d, members = index.knn(q, knn_cap)
            members = members[d <= radius]
        if k_idx not in members:
            members = np.concatenate([[k_idx], members])
        members = np.sort(members)
        patches.append(Patch(int(k_idx), members, cloud.select(members), len(members) >= min_patch_size))
    return PatchSet(tuple(patches), radius, mode)
