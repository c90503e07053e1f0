"""Per-point feature extractors.

Two interchangeable extractors produce unit-norm features:

``SeededAttentionExtractor``
    Geometric self-attention and cross-attention blocks fed by the structure
    embedding, with weights drawn from a seeded generator (no training).
``FPFHExtractor``
    Fast point feature histograms built from normals and neighbor angle
    statistics. Needs no training, so it is the default for registration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from numpy.typing import NDArray
from scipy import sparse
from scipy.spatial import cKDTree

from fflogo.embedding import EmbeddingConfig, GeometricEmbedding, embed_cloud, projection_weights
from fflogo.errors import ExtractorError
from fflogo.pointcloud import PointCloud, estimate_normals

EXTRACTORS = ("seeded-attention", "classical-descriptor")


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Unit-norm features for a subset of a cloud's points.

    ``indices[r]`` is the cloud index of ``features[r]``.
    """

    features: NDArray[np.float64]
    indices: NDArray[np.int64]

    def __post_init__(self) -> None:
        f = np.asarray(self.features, dtype=np.float64)
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if f.ndim != 2 or f.shape[0] != idx.shape[0]:
            raise ValueError("features must be (n, d) with one index per row")
        if f.shape[0] and not np.all(np.abs(np.linalg.norm(f, axis=1) - 1.0) <= 1e-6):
            raise ValueError("features must be unit norm")
        f.setflags(write=False)
        idx.setflags(write=False)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return self.features.shape[0]


class FeatureExtractor(Protocol):
    name: str

    def extract(self, cloud: PointCloud, embedding: GeometricEmbedding | None = None) -> FeatureSet: ...

    def extract_pair(self, cloud_k: PointCloud, cloud_l: PointCloud) -> tuple[FeatureSet, FeatureSet]: ...


def _unit_rows(x: NDArray) -> NDArray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# seeded geometric attention
# ---------------------------------------------------------------------------


def _softmax(x: NDArray, axis: int = -1) -> NDArray:
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def _layer_norm(x: NDArray) -> NDArray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-6)


class SeededAttentionExtractor:
    """Self/cross-attention stack over the structure embedding, seeded weights.

    Each block runs geometric self-attention on both clouds (keys are offset
    by the projected pair embedding) followed by cross-attention between the
    clouds. Initial point features are the row means of the embedding, so the
    whole stack is invariant to rigid motion of either cloud.
    """

    name = "seeded-attention"

    def __init__(self, cfg: EmbeddingConfig | None = None, seed: int = 0, n_blocks: int = 2,
                 max_points: int = 256, min_points: int = 8):
        self.cfg = cfg or EmbeddingConfig()
        self.seed = seed
        self.n_blocks = n_blocks
        self.max_points = max_points
        self.min_points = min_points
        d = self.cfg.d_t
        rng = np.random.default_rng(seed)
        s = 1.0 / np.sqrt(d)
        self.W_D, self.W_A = projection_weights(d, seed)
        self._blocks = [
            {name: rng.normal(0.0, s, (d, d)) for name in ("q", "k", "v", "r", "o", "cq", "ck", "cv", "co")}
            for _ in range(n_blocks)
        ]

    def embed(self, cloud: PointCloud) -> GeometricEmbedding:
        self._check(cloud)
        return embed_cloud(cloud, self.cfg, self.W_D, self.W_A)

    def _check(self, cloud: PointCloud) -> None:
        if len(cloud) < max(self.min_points, self.cfg.k_angular + 1):
            raise ExtractorError(f"seeded-attention needs at least {self.min_points} points, got {len(cloud)}")
        if len(cloud) > self.max_points:
            raise ExtractorError(
                f"seeded-attention is limited to {self.max_points} points (pairwise embedding), got {len(cloud)}"
            )

    def _self_attention(self, x: NDArray, e: NDArray, w: dict) -> NDArray:
        d = x.shape[1]
        q, k, v = x @ w["q"], x @ w["k"], x @ w["v"]
        r = e @ w["r"]  # (n, n, d)
        scores = (q @ k.T + np.einsum("id,ijd->ij", q, r)) / np.sqrt(d)
        return _layer_norm(x + (_softmax(scores) @ v) @ w["o"])

    @staticmethod
    def _cross_attention(x: NDArray, y: NDArray, w: dict) -> NDArray:
        d = x.shape[1]
        scores = (x @ w["cq"]) @ (y @ w["ck"]).T / np.sqrt(d)
        return _layer_norm(x + (_softmax(scores) @ (y @ w["cv"])) @ w["co"])

    def _run(self, emb_k: GeometricEmbedding, emb_l: GeometricEmbedding | None):
        xk = _layer_norm(emb_k.values.mean(axis=1))
        xl = None if emb_l is None else _layer_norm(emb_l.values.mean(axis=1))
        for w in self._blocks:
            xk = self._self_attention(xk, emb_k.values, w)
            if xl is not None:
                xl = self._self_attention(xl, emb_l.values, w)
                xk, xl = self._cross_attention(xk, xl, w), self._cross_attention(xl, xk, w)
        return xk, xl

    def extract(self, cloud: PointCloud, embedding: GeometricEmbedding | None = None) -> FeatureSet:
        emb = embedding if embedding is not None else self.embed(cloud)
        if emb.n != len(cloud):
            raise ValueError("embedding does not match the cloud size")
        xk, _ = self._run(emb, None)
        return FeatureSet(_unit_rows(xk), np.arange(len(cloud)))

    def extract_pair(self, cloud_k: PointCloud, cloud_l: PointCloud) -> tuple[FeatureSet, FeatureSet]:
        xk, xl = self._run(self.embed(cloud_k), self.embed(cloud_l))
        return (
            FeatureSet(_unit_rows(xk), np.arange(len(cloud_k))),
            FeatureSet(_unit_rows(xl), np.arange(len(cloud_l))),
        )


# ---------------------------------------------------------------------------
# FPFH
# ---------------------------------------------------------------------------


def pair_features(p1: NDArray, n1: NDArray, p2: NDArray, n2: NDArray) -> tuple[NDArray, NDArray, NDArray, NDArray]:
    """Darboux-frame angles (theta, alpha, phi) for point pairs.

    The frame is anchored on the endpoint whose normal is more aligned with the
    connecting line, which makes the result independent of pair order.
    Returns the three angle features and a validity mask.
    """
    dp = p2 - p1
    dist = np.linalg.norm(dp, axis=1)
    valid = dist > 0
    dist_safe = np.where(valid, dist, 1.0)
    a1 = np.einsum("ij,ij->i", n1, dp) / dist_safe
    a2 = np.einsum("ij,ij->i", n2, dp) / dist_safe
    swap = np.arccos(np.clip(np.abs(a1), 0, 1)) > np.arccos(np.clip(np.abs(a2), 0, 1))
    u = np.where(swap[:, None], n2, n1)
    other = np.where(swap[:, None], n1, n2)
    dp = np.where(swap[:, None], -dp, dp)
    phi = np.where(swap, -a2, a1)
    v = np.cross(dp, u)
    vn = np.linalg.norm(v, axis=1)
    valid &= vn > 0
    v = v / np.where(vn > 0, vn, 1.0)[:, None]
    w = np.cross(u, v)
    alpha = np.einsum("ij,ij->i", v, other)
    theta = np.arctan2(np.einsum("ij,ij->i", w, other), np.einsum("ij,ij->i", u, other))
    return theta, alpha, phi, valid


class FPFHExtractor:
    """Fast point feature histograms (3 x n_bins), L2-normalized.

    Normals are estimated with ``normal_k`` neighbors if the cloud has none.
    Points with invalid normals or without neighbors inside ``radius`` get no
    feature and are left out of the returned ``FeatureSet``.
    """

    name = "classical-descriptor"

    def __init__(self, radius: float = 0.25, normal_k: int = 20, n_bins: int = 11, min_support: int = 10):
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.radius = radius
        self.normal_k = normal_k
        self.n_bins = n_bins
        self.min_support = min_support

    def histograms(self, cloud: PointCloud) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
        """Raw FPFH histograms (n, 3*n_bins) and a mask of points that have one."""
        if len(cloud) < self.min_support:
            raise ExtractorError(f"classical-descriptor needs at least {self.min_support} points, got {len(cloud)}")
        if not cloud.has_normals:
            cloud = estimate_normals(cloud, k=min(self.normal_k, len(cloud) - 1))
        pts, nrm, ok = cloud.points, cloud.normals, cloud.normal_valid
        n, nb = len(pts), self.n_bins

        pairs = cKDTree(pts).query_pairs(self.radius, output_type="ndarray").astype(np.int64)
        if len(pairs):
            pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
            pairs = pairs[ok[pairs[:, 0]] & ok[pairs[:, 1]]]
        i, j = pairs[:, 0], pairs[:, 1]
        theta, alpha, phi, valid = pair_features(pts[i], nrm[i], pts[j], nrm[j])
        i, j, theta, alpha, phi = i[valid], j[valid], theta[valid], alpha[valid], phi[valid]

        b_theta = np.clip(np.floor(nb * (theta + np.pi) / (2 * np.pi)), 0, nb - 1).astype(np.int64)
        b_alpha = np.clip(np.floor(nb * (alpha + 1.0) * 0.5), 0, nb - 1).astype(np.int64)
        b_phi = np.clip(np.floor(nb * (phi + 1.0) * 0.5), 0, nb - 1).astype(np.int64)
        bins = np.stack([b_theta, nb + b_alpha, 2 * nb + b_phi], axis=1)  # (P, 3)

        width = 3 * nb
        deg = np.bincount(i, minlength=n) + np.bincount(j, minlength=n)
        counts = np.zeros(n * width)
        for col in range(3):
            counts += np.bincount(i * width + bins[:, col], minlength=n * width)
            counts += np.bincount(j * width + bins[:, col], minlength=n * width)
        spfh = counts.reshape(n, width)
        has = deg > 0
        spfh[has] *= (100.0 / deg[has])[:, None]

        d2 = np.sum((pts[i] - pts[j]) ** 2, axis=1)
        inv = 1.0 / d2
        # neighbor SPFHs weighted by inverse squared distance, in both directions
        W = sparse.csr_matrix(
            (np.concatenate([inv, inv]), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n)
        )
        acc = W @ spfh
        sub = acc.reshape(n, 3, nb).sum(axis=2)
        scale = np.where(sub > 0, 100.0 / np.where(sub > 0, sub, 1.0), 0.0)
        fpfh = (acc.reshape(n, 3, nb) * scale[:, :, None]).reshape(n, width) + spfh
        return fpfh, has & ok

    def extract(self, cloud: PointCloud, embedding: GeometricEmbedding | None = None) -> FeatureSet:
        hist, mask = self.histograms(cloud)
        idx = np.flatnonzero(mask)
        if len(idx) == 0:
            raise ExtractorError("no point has a neighbor within the descriptor radius")
        return FeatureSet(_unit_rows(hist[idx]), idx)

    def extract_pair(self, cloud_k: PointCloud, cloud_l: PointCloud) -> tuple[FeatureSet, FeatureSet]:
        return self.extract(cloud_k), self.extract(cloud_l)


def make_extractor(name: str, **kwargs) -> FeatureExtractor:
    if name == "seeded-attention":
        return SeededAttentionExtractor(**kwargs)
    if name == "classical-descriptor":
        return FPFHExtractor(**kwargs)
    raise ValueError(f"unknown extractor {name!r}; expected one of {EXTRACTORS}")


def extract_features(
    cloud: PointCloud,
    embedding: GeometricEmbedding | None,
    extractor: FeatureExtractor,
) -> FeatureSet:
    return extractor.extract(cloud, embedding)
