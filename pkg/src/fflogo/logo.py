"""Local point-to-plane patch solves fused into one global transform.

Each key-region patch of the source is aligned to the filtered target with
Gauss-Newton on point-to-plane residuals ``r_i = (T(a_i) - b_i) . n_i``.
Every converged patch maps its keypoint ``a`` to ``T_patch(a)``; one rigid
least-squares fit over those keypoint pairs gives the final transform.

Twist convention for the linearization: an update ``xi = (omega, v)`` maps a
transformed point ``q`` to ``exp(omega) (q - c) + c + v`` where ``c`` is the
centroid of the transformed patch, so ``dr/dxi = [(q - c) x n, n]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from fflogo.errors import DegenerateGeometryError
from fflogo.index import NeighborIndex
from fflogo.keyregion import KeypointSet
from fflogo.pointcloud import PointCloud
from fflogo.transform import RigidTransform, compose, fit_rigid, rodrigues

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LocalSolveParams:
    k_candidates: int = 5
    max_distance: float = 0.15
    max_iterations: int = 50
    tolerance: float = 1e-6
    min_correspondences: int = 6
    # smallest/largest eigenvalue of the scaled 6x6 system below which the patch is degenerate
    degeneracy_ratio: float = 1e-6
    max_halvings: int = 10


@dataclass(frozen=True, eq=False)
class PlaneCorrespondences:
    """Accepted point-to-plane matches: source rows -> target anchors with normals."""

    source: NDArray[np.int64]
    target: NDArray[np.int64]
    normals: NDArray[np.float64]

    def __len__(self) -> int:
        return len(self.source)


@dataclass(frozen=True)
class PlaneCorrespondence:
    source: int
    target: int
    normal: NDArray[np.float64]
    residual: float


@dataclass(frozen=True, eq=False)
class LocalSolveResult:
    patch_id: int
    transform: RigidTransform
    rms: float
    iterations: int
    converged: bool
    correspondences: int = 0
    status: str = "ok"
    # (cost before, cost after) of every accepted step, on that step's correspondence set
    history: tuple[tuple[float, float], ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "patch_id": self.patch_id,
            "transform": self.transform.to_list(),
            "rms": self.rms,
            "iterations": self.iterations,
            "converged": self.converged,
            "correspondences": self.correspondences,
            "status": self.status,
        }


def _target_index(target: PointCloud, index: NeighborIndex | None) -> NeighborIndex:
    if not target.has_normals:
        raise ValueError("target cloud needs normals for point-to-plane matching")
    return index if index is not None else target.index


def find_plane_correspondences(
    points: ArrayLike,
    target: PointCloud,
    index: NeighborIndex | None = None,
    k_candidates: int = 5,
    max_distance: float = np.inf,
) -> PlaneCorrespondences:
    """For each point, the candidate plane with the smallest |(a - b) . n|.

    Candidates are the ``k_candidates`` nearest target points with valid
    normals; ties keep the nearer candidate. Points whose chosen anchor is
    farther than ``max_distance`` or that have no valid candidate are dropped.
    """
    index = _target_index(target, index)
    a = np.atleast_2d(np.asarray(points, dtype=np.float64))
    dist, cand = index.knn(a, k_candidates)
    dist = dist.reshape(len(a), -1)
    cand = cand.reshape(len(a), -1)
    nrm = target.normals[cand]  # (n, k, 3)
    offset = np.einsum("nkc,nkc->nk", a[:, None, :] - target.points[cand], nrm)
    score = np.where(target.normal_valid[cand], np.abs(offset), np.inf)
    best = np.argmin(score, axis=1)
    rows = np.arange(len(a))
    ok = np.isfinite(score[rows, best]) & (dist[rows, best] <= max_distance)
    src = rows[ok]
    tgt = cand[rows, best][ok]
    return PlaneCorrespondences(src, tgt, target.normals[tgt])


def find_plane_correspondence(
    point: ArrayLike,
    target: PointCloud,
    index: NeighborIndex | None = None,
    k_candidates: int = 5,
) -> PlaneCorrespondence | None:
    """Single-point form of :func:`find_plane_correspondences`; None when rejected."""
    pc = find_plane_correspondences(np.asarray(point).reshape(1, 3), target, index, k_candidates)
    if len(pc) == 0:
        return None
    j = int(pc.target[0])
    r = float((np.asarray(point, dtype=np.float64) - target.points[j]) @ pc.normals[0])
    return PlaneCorrespondence(0, j, pc.normals[0], r)


def point_to_plane_residuals(
    source: ArrayLike,
    anchors: ArrayLike,
    normals: ArrayLike,
    T: RigidTransform,
) -> NDArray[np.float64]:
    """r_i = (T(a_i) - b_i) . n_i for aligned rows of source, anchor and normal."""
    q = T.apply(np.asarray(source, dtype=np.float64))
    return np.einsum("ij,ij->i", q - np.asarray(anchors, dtype=np.float64), np.asarray(normals, dtype=np.float64))


def plane_jacobian(
    source: ArrayLike,
    normals: ArrayLike,
    T: RigidTransform,
    center: ArrayLike | None = None,
) -> NDArray[np.float64]:
    """d r_i / d xi at xi = 0, rows ``[(q_i - c) x n_i, n_i]`` (see module docstring)."""
    q = T.apply(np.asarray(source, dtype=np.float64))
    c = q.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
    n = np.asarray(normals, dtype=np.float64)
    return np.hstack([np.cross(q - c, n), n])


def twist_update(xi: ArrayLike, center: ArrayLike) -> RigidTransform:
    """The rigid motion q -> exp(omega)(q - c) + c + v for xi = (omega, v)."""
    xi = np.asarray(xi, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    R = rodrigues(xi[:3])
    return RigidTransform(R, c - R @ c + xi[3:])


def perturb(T: RigidTransform, xi: ArrayLike, center: ArrayLike) -> RigidTransform:
    return compose(twist_update(xi, center), T)


def local_patch_optimize(
    patch: PointCloud | ArrayLike,
    target: PointCloud,
    T_init: RigidTransform,
    params: LocalSolveParams | None = None,
    index: NeighborIndex | None = None,
    patch_id: int = 0,
) -> LocalSolveResult:
    """Gauss-Newton point-to-plane alignment of one patch to the target.

    Correspondences are re-found at the current pose every iteration and gated
    by ``params.max_distance``. Steps that do not lower the cost on the current
    correspondence set are halved (up to ``max_halvings`` times). Stops when the
    twist update norm drops below ``params.tolerance`` or after
    ``params.max_iterations`` iterations. Reaching an earlier correspondence
    set again after a different one in between also counts as converged, since
    the iterate is then cycling between the same linearizations. A patch is
    reported not converged when it has too few correspondences, its 6x6 system
    is rank deficient, or the iteration cap is hit.
    """
    params = params or LocalSolveParams()
    index = _target_index(target, index)
    src = patch.points if isinstance(patch, PointCloud) else np.asarray(patch, dtype=np.float64)
    T = T_init
    history: list[tuple[float, float]] = []
    rms = float("nan")
    n_corr = 0
    seen: dict[bytes, int] = {}

    for it in range(1, params.max_iterations + 1):
        pc = find_plane_correspondences(T.apply(src), target, index, params.k_candidates, params.max_distance)
        n_corr = len(pc)
        if n_corr < params.min_correspondences:
            return LocalSolveResult(patch_id, T, rms, it, False, n_corr, "too few correspondences", tuple(history))
        key = pc.source.tobytes() + pc.target.tobytes()
        if it - seen.get(key, it) > 1:
            # matching flips between the same sets: a fixed point of the discrete objective
            return LocalSolveResult(patch_id, T, rms, it, True, n_corr, "correspondence cycle", tuple(history))
        seen[key] = it
        a = src[pc.source]
        b = target.points[pc.target]
        n = pc.normals
        r = point_to_plane_residuals(a, b, n, T)
        cost = float(r @ r)
        q = T.apply(a)
        c = q.mean(axis=0)
        J = plane_jacobian(a, n, T, c)

        # scale the rotation block by the patch radius so the rank test is unit-free
        L = float(np.sqrt(np.mean(np.sum((q - c) ** 2, axis=1)))) or 1.0
        Js = J / np.array([L, L, L, 1.0, 1.0, 1.0])
        H = Js.T @ Js
        ev = np.linalg.eigvalsh(H)
        if ev[-1] <= 0 or ev[0] < params.degeneracy_ratio * ev[-1]:
            return LocalSolveResult(patch_id, T, float(np.sqrt(cost / n_corr)), it, False, n_corr,
                                    "degenerate", tuple(history))
        step_s = -np.linalg.solve(H, Js.T @ r)
        xi = step_s / np.array([L, L, L, 1.0, 1.0, 1.0])

        if np.linalg.norm(xi) < params.tolerance:
            return LocalSolveResult(patch_id, T, float(np.sqrt(cost / n_corr)), it, True, n_corr, "ok",
                                    tuple(history))

        scale = 1.0
        accepted = False
        for _ in range(params.max_halvings + 1):
            T_try = perturb(T, scale * xi, c)
            r_try = point_to_plane_residuals(a, b, n, T_try)
            cost_try = float(r_try @ r_try)
            if cost_try <= cost:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            # no descent left on this correspondence set
            return LocalSolveResult(patch_id, T, float(np.sqrt(cost / n_corr)), it, True, n_corr, "ok",
                                    tuple(history))
        history.append((cost, cost_try))
        T = T_try
        rms = float(np.sqrt(cost_try / n_corr))
        if np.linalg.norm(scale * xi) < params.tolerance:
            return LocalSolveResult(patch_id, T, rms, it, True, n_corr, "ok", tuple(history))

    return LocalSolveResult(patch_id, T, rms, params.max_iterations, False, n_corr, "max iterations",
                            tuple(history))


@dataclass(frozen=True, eq=False)
class FusionResult:
    transform: RigidTransform
    used: tuple[int, ...]
    degraded: bool
    reason: str = ""


def global_fuse(
    keys: KeypointSet,
    locals_: list[LocalSolveResult],
    fallback: RigidTransform | None = None,
) -> FusionResult:
    """Rigid least squares over keypoints a_i -> T_i(a_i) of converged patches.

    ``locals_[n]`` must belong to keypoint ``n``. With fewer than three
    converged patches, or collinear keypoints, the converged patch with the
    lowest RMS is used instead (or ``fallback`` if none converged) and the
    result is flagged degraded.
    """
    if len(locals_) != len(keys):
        raise ValueError("one local result per keypoint is required")
    used = [n for n, res in enumerate(locals_) if res.converged]
    if len(used) >= 3:
        a = keys.points[used]
        b = np.stack([locals_[n].transform.apply(keys.points[n]) for n in used])
        try:
            return FusionResult(fit_rigid(a, b), tuple(used), False)
        except DegenerateGeometryError:
            reason = "collinear keypoints"
    else:
        reason = f"only {len(used)} converged patches"
    if used:
        best = min(used, key=lambda n: (locals_[n].rms, n))
        return FusionResult(locals_[best].transform, (best,), True, reason)
    if fallback is None:
        raise DegenerateGeometryError(f"fusion impossible: {reason}")
    return FusionResult(fallback, (), True, reason)
