"""Rigid transforms in SE(3) and closed-form rigid least squares.

Composition convention: ``compose(T1, T2)`` (equivalently ``T1 @ T2``) applies
``T2`` first, then ``T1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from fflogo.errors import DegenerateGeometryError

ORTHO_TOL = 1e-9


def _readonly(a: NDArray) -> NDArray:
    a.setflags(write=False)
    return a


def orthonormalize(R: ArrayLike) -> NDArray[np.float64]:
    """Nearest rotation to ``R`` in the Frobenius sense (polar decomposition)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotation_drift(R: NDArray) -> float:
    """Largest deviation of ``R`` from the SO(3) constraints."""
    ortho = np.max(np.abs(R.T @ R - np.eye(3)))
    return float(max(ortho, abs(np.linalg.det(R) - 1.0)))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation acting on points as ``p -> R p + t``."""

    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]

    def __post_init__(self) -> None:
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"expected 3x3 rotation and 3-vector, got {R.shape} and {t.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform has non-finite entries")
        if rotation_drift(R) > ORTHO_TOL:
            raise ValueError(f"rotation is not in SO(3) (drift {rotation_drift(R):.3e})")
        object.__setattr__(self, "rotation", _readonly(R))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M: ArrayLike, reorthonormalize: bool = False) -> RigidTransform:
        M = np.asarray(M, dtype=np.float64)
        if M.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {M.shape}")
        if not np.allclose(M[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise ValueError("last row of a homogeneous rigid transform must be [0, 0, 0, 1]")
        R = orthonormalize(M[:3, :3]) if reorthonormalize else M[:3, :3]
        return cls(R, M[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec: ArrayLike, translation: ArrayLike = (0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(rodrigues(rotvec), translation)

    def as_matrix(self) -> NDArray[np.float64]:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points: ArrayLike) -> NDArray[np.float64]:
        """Transform an (N, 3) array (or a single 3-vector) of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def rotate(self, vectors: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return compose(self, other)

    def allclose(self, other: RigidTransform, atol: float = 1e-12) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol)
        )

    # -- serialization ---------------------------------------------------

    def to_list(self) -> list[list[float]]:
        """Row-major 4x4 nested list."""
        return self.as_matrix().tolist()

    @classmethod
    def from_list(cls, rows: list[list[float]]) -> RigidTransform:
        """Inverse of :meth:`to_list`; rotations rounded by text storage are re-orthonormalized."""
        M = np.asarray(rows, dtype=np.float64)
        return cls.from_matrix(M, reorthonormalize=M.shape == (4, 4) and rotation_drift(M[:3, :3]) > ORTHO_TOL)

    def to_json(self) -> str:
        return json.dumps(self.to_list())

    @classmethod
    def from_json(cls, text: str) -> RigidTransform:
        return cls.from_list(json.loads(text))

    def to_text(self) -> str:
        """Four whitespace-separated lines of the homogeneous matrix."""
        return "\n".join(" ".join(repr(float(v)) for v in row) for row in self.as_matrix()) + "\n"

    @classmethod
    def from_text(cls, text: str) -> RigidTransform:
        rows = [line.split() for line in text.strip().splitlines() if line.strip()]
        if len(rows) != 4 or any(len(r) != 4 for r in rows):
            raise ValueError("expected 4 lines of 4 numbers")
        return cls.from_list([[float(v) for v in r] for r in rows])

    def save(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(self.to_json())
        else:
            path.write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> RigidTransform:
        path = Path(path)
        text = path.read_text()
        return cls.from_json(text) if path.suffix == ".json" else cls.from_text(text)


def compose(T1: RigidTransform, T2: RigidTransform) -> RigidTransform:
    """Apply ``T2`` first, then ``T1``.

    The product rotation is re-orthonormalized when its drift exceeds 1e-9 so
    long chains stay inside SO(3).
    """
    R = T1.rotation @ T2.rotation
    t = T1.rotation @ T2.translation + T1.translation
    if rotation_drift(R) > ORTHO_TOL * 0.5:
        R = orthonormalize(R)
    return RigidTransform(R, t)


def invert(T: RigidTransform) -> RigidTransform:
    return T.inverse()


def skew(v: ArrayLike) -> NDArray[np.float64]:
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(w: ArrayLike) -> NDArray[np.float64]:
    """Exponential map so(3) -> SO(3)."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        # second-order series keeps small steps orthogonal to ~1e-24
        K = skew(w)
        return orthonormalize(np.eye(3) + K + 0.5 * K @ K)
    K = skew(w / theta)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def rotation_about(axis: ArrayLike, angle_deg: float) -> NDArray[np.float64]:
    axis = np.asarray(axis, dtype=np.float64)
    return rodrigues(axis / np.linalg.norm(axis) * np.deg2rad(angle_deg))


def fit_rigid(
    source: ArrayLike,
    target: ArrayLike,
    weights: ArrayLike | None = None,
) -> RigidTransform:
    """Weighted rigid least squares: argmin_T sum w_i ||T(source_i) - target_i||^2.

    Weighted centroids are removed, the 3x3 cross-covariance is decomposed with
    an SVD and the reflection case is corrected through the determinant sign.

    Raises:
        DegenerateGeometryError: fewer than 3 pairs, or the weighted source
            points are collinear so the rotation is not determined.
    """
    A = np.asarray(source, dtype=np.float64)
    B = np.asarray(target, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2 or A.shape[1] != 3:
        raise ValueError(f"source/target must be matching (N, 3) arrays, got {A.shape} and {B.shape}")
    if A.shape[0] < 3:
        raise DegenerateGeometryError(f"need at least 3 point pairs, got {A.shape[0]}")
    w = np.ones(A.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != A.shape[0] or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative, one per pair, with positive sum")
    w = w / w.sum()

    ca = w @ A
    cb = w @ B
    A0 = A - ca
    B0 = B - cb
    # collinearity: second singular value of the weighted spread
    spread = np.linalg.svd(np.sqrt(w)[:, None] * A0, compute_uv=False)
    if spread[0] == 0.0 or spread[1] <= 1e-9 * spread[0]:
        raise DegenerateGeometryError("source points are collinear or coincident")

    H = (w[:, None] * A0).T @ B0
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = cb - R @ ca
    return RigidTransform(R, t)
