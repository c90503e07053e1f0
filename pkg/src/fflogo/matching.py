"""Feature correlation, mutual top-k filtering and coarse pose estimation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from fflogo.errors import DegenerateGeometryError, NoMutualMatchesError
from fflogo.features import FeatureSet
from fflogo.pointcloud import PointCloud
from fflogo.transform import RigidTransform, fit_rigid, orthonormalize

# (upper bound on candidate matches, k); None means unbounded
DEFAULT_TOPK_SCHEDULE: tuple[tuple[int | None, int], ...] = ((1000, 1), (2500, 2), (None, 3))


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Index pairs ``(i, j)`` between two clouds with weights in (0, 1]."""

    i: NDArray[np.int64]
    j: NDArray[np.int64]
    weights: NDArray[np.float64]

    def __post_init__(self) -> None:
        i = np.asarray(self.i, dtype=np.int64).reshape(-1)
        j = np.asarray(self.j, dtype=np.int64).reshape(-1)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not (len(i) == len(j) == len(w)):
            raise ValueError("i, j and weights must have equal length")
        if np.any(i < 0) or np.any(j < 0):
            raise ValueError("indices must be non-negative")
        if len(w) and (np.any(w <= 0) or np.any(w > 1)):
            raise ValueError("weights must lie in (0, 1]")
        if len(i) and len(np.unique(np.stack([i, j], axis=1), axis=0)) != len(i):
            raise ValueError("duplicate correspondence pairs")
        for a in (i, j, w):
            a.setflags(write=False)
        object.__setattr__(self, "i", i)
        object.__setattr__(self, "j", j)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.i)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.i.tolist(), self.j.tolist()))

    def remap(self, row_ids: ArrayLike, col_ids: ArrayLike) -> CorrespondenceSet:
        """Translate matrix row/column positions into cloud indices."""
        return CorrespondenceSet(np.asarray(row_ids)[self.i], np.asarray(col_ids)[self.j], self.weights)

    def subset(self, mask: ArrayLike) -> CorrespondenceSet:
        m = np.asarray(mask)
        return CorrespondenceSet(self.i[m], self.j[m], self.weights[m])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["i", "j", "weight"])
            for a, b, w in zip(self.i.tolist(), self.j.tolist(), self.weights.tolist()):
                writer.writerow([a, b, repr(w)])

    @classmethod
    def from_csv(cls, path: str | Path) -> CorrespondenceSet:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [int(r["i"]) for r in rows],
            [int(r["j"]) for r in rows],
            [float(r["weight"]) for r in rows],
        )


def gaussian_correlation(feat_k: FeatureSet | ArrayLike, feat_l: FeatureSet | ArrayLike) -> NDArray[np.float64]:
    """s_ij = exp(-||h_i - h_j||^2) between unit-norm feature rows."""
    hk = feat_k.features if isinstance(feat_k, FeatureSet) else np.asarray(feat_k, dtype=np.float64)
    hl = feat_l.features if isinstance(feat_l, FeatureSet) else np.asarray(feat_l, dtype=np.float64)
    sq = (
        np.sum(hk * hk, axis=1)[:, None]
        + np.sum(hl * hl, axis=1)[None, :]
        - 2.0 * (hk @ hl.T)
    )
    return np.exp(-np.maximum(sq, 0.0))


def topk_for_matches(n_candidates: int, schedule=DEFAULT_TOPK_SCHEDULE) -> int:
    """k from a (bound, k) schedule, first bound >= n_candidates wins."""
    for bound, k in schedule:
        if bound is None or n_candidates <= bound:
            return int(k)
    return int(schedule[-1][1])


def _topk_mask(S: NDArray, k: int) -> NDArray[np.bool_]:
    """Boolean mask of each row's k largest entries, ties to the lower column."""
    n, m = S.shape
    k = min(k, m)
    kth = np.partition(S, m - k, axis=1)[:, m - k : m - k + 1]
    mask = S >= kth
    # rows whose k-th value is tied keep only the lowest-column ties
    crowded = np.flatnonzero(mask.sum(axis=1) > k)
    if len(crowded):
        sub = S[crowded]
        greater = sub > kth[crowded]
        need = k - greater.sum(axis=1, keepdims=True)
        equal = sub == kth[crowded]
        mask[crowded] = greater | (equal & (np.cumsum(equal, axis=1) <= need))
    return mask


@dataclass(frozen=True, eq=False)
class FilterResult:
    correspondences: CorrespondenceSet
    k_indices: NDArray[np.int64]
    l_indices: NDArray[np.int64]
    filtered_k: PointCloud | None = None
    filtered_l: PointCloud | None = None


def mutual_topk_filter(
    S: ArrayLike,
    k: int,
    cloud_k: PointCloud | None = None,
    cloud_l: PointCloud | None = None,
) -> FilterResult:
    """Keep (i, j) when j is in row i's top-k and i is in column j's top-k.

    Pairs come out sorted by (i, j). ``k_indices``/``l_indices`` list the rows
    and columns that take part in at least one kept pair; when clouds are
    given, the matching sub-clouds are materialized too.

    Raises:
        NoMutualMatchesError: nothing survives the mutual check.
    """
    S = np.asarray(S, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if S.ndim != 2 or 0 in S.shape:
        raise ValueError(f"expected a non-empty 2D matrix, got shape {S.shape}")
    mutual = _topk_mask(S, k) & _topk_mask(np.ascontiguousarray(S.T), k).T
    i, j = np.nonzero(mutual)
    if len(i) == 0:
        raise NoMutualMatchesError(f"no mutual top-{k} pairs in a {S.shape[0]}x{S.shape[1]} correlation matrix")
    corr = CorrespondenceSet(i, j, S[i, j])
    ki, li = np.unique(i), np.unique(j)
    return FilterResult(
        corr,
        ki,
        li,
        None if cloud_k is None else cloud_k.select(ki),
        None if cloud_l is None else cloud_l.select(li),
    )


# ---------------------------------------------------------------------------
# coarse transform
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoarseResult:
    transform: RigidTransform
    inliers: NDArray[np.bool_]
    hypotheses: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def inlier_count(self) -> int:
        return int(self.inliers.sum())


def _batch_kabsch(A: NDArray, B: NDArray) -> tuple[NDArray, NDArray]:
    """Unweighted rigid fits for a batch of (M, m, 3) point sets."""
    ca = A.mean(axis=1, keepdims=True)
    cb = B.mean(axis=1, keepdims=True)
    H = np.einsum("mki,mkj->mij", A - ca, B - cb)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("mji,mkj->mik", Vt, U)))
    D = np.zeros((len(A), 3, 3))
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = np.einsum("mji,mjk,mlk->mil", Vt, D, U)
    t = cb[:, 0, :] - np.einsum("mij,mj->mi", R, ca[:, 0, :])
    return R, t


def _sample_triplets(rng, n_corr, P, Q, count, edge_similarity, min_edge):
    tri = rng.integers(0, n_corr, size=(count, 3))
    ok = (tri[:, 0] != tri[:, 1]) & (tri[:, 0] != tri[:, 2]) & (tri[:, 1] != tri[:, 2])
    tri = tri[ok]
    a, b = P[tri], Q[tri]
    for u, v in ((0, 1), (0, 2), (1, 2)):
        da = np.linalg.norm(a[:, u] - a[:, v], axis=1)
        db = np.linalg.norm(b[:, u] - b[:, v], axis=1)
        good = (da >= edge_similarity * db) & (db >= edge_similarity * da) & (da > min_edge)
        tri, a, b = tri[good], a[good], b[good]
    return tri


def estimate_coarse(
    corr: CorrespondenceSet,
    cloud_k: PointCloud,
    cloud_l: PointCloud,
    *,
    consensus: bool = True,
    inlier_threshold: float = 0.15,
    max_iterations: int = 50000,
    max_validations: int = 5000,
    edge_similarity: float = 0.9,
    refine_rounds: int = 3,
    seed: int = 0,
) -> CoarseResult:
    """Weighted rigid fit over correspondences, optionally inside a consensus loop.

    With ``consensus`` on, random correspondence triplets are screened by edge
    length agreement, each survivor is fitted exactly, and the hypothesis with
    the most pairs within ``inlier_threshold`` wins (ties: lower summed inlier
    residual). The winner is then refitted with the s_ij weights on its inlier
    set for ``refine_rounds`` rounds.
    """
    if len(corr) < 3:
        raise DegenerateGeometryError(f"need at least 3 correspondences, got {len(corr)}")
    P = cloud_k.points[corr.i]
    Q = cloud_l.points[corr.j]
    w = corr.weights
    if not consensus:
        T = fit_rigid(P, Q, w)
        res = np.linalg.norm(T.apply(P) - Q, axis=1)
        return CoarseResult(T, res < inlier_threshold, 0)

    rng = np.random.default_rng(seed)
    tri = _sample_triplets(rng, len(corr), P, Q, max_iterations, edge_similarity, min_edge=1e-9)
    tri = tri[:max_validations]
    best_T = None
    best_key = (-1, 0.0)
    for start in range(0, len(tri), 256):
        chunk = tri[start : start + 256]
        R, t = _batch_kabsch(P[chunk], Q[chunk])
        pred = np.einsum("mij,nj->mni", R, P) + t[:, None, :]
        res = np.linalg.norm(pred - Q[None], axis=2)
        inl = res < inlier_threshold
        counts = inl.sum(axis=1)
        cost = np.where(inl, res, 0.0).sum(axis=1)
        for m in np.lexsort((cost, -counts))[:1]:
            key = (int(counts[m]), -float(cost[m]))
            if key > best_key:
                best_key = key
                best_T = (R[m], t[m])
    if best_T is None:
        # no triplet passed the screen; fall back to the plain weighted fit
        T = fit_rigid(P, Q, w)
        res = np.linalg.norm(T.apply(P) - Q, axis=1)
        return CoarseResult(T, res < inlier_threshold, 0, {"fallback": "no consistent triplet"})

    T = RigidTransform(orthonormalize(best_T[0]), best_T[1])
    inliers = np.linalg.norm(T.apply(P) - Q, axis=1) < inlier_threshold
    for _ in range(refine_rounds):
        if inliers.sum() < 3:
            break
        try:
            T_new = fit_rigid(P[inliers], Q[inliers], w[inliers])
        except DegenerateGeometryError:
            break
        new_inliers = np.linalg.norm(T_new.apply(P) - Q, axis=1) < inlier_threshold
        if new_inliers.sum() < inliers.sum():
            break
        T, done = T_new, np.array_equal(new_inliers, inliers)
        inliers = new_inliers
        if done:
            break
    return CoarseResult(T, inliers, len(tri))


def coarse_transform(
    corr: CorrespondenceSet,
    cloud_k: PointCloud,
    cloud_l: PointCloud,
    **kwargs,
) -> RigidTransform:
    """T_c from filtered correspondences; see :func:`estimate_coarse`."""
    return estimate_coarse(corr, cloud_k, cloud_l, **kwargs).transform
