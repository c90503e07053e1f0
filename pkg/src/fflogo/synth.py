"""Synthetic cross-modality pairs with known ground truth.

Modality gaps are simulated by per-cloud density thinning, half-space
cropping (partial overlap), isotropic Gaussian noise and uniform outliers.
All randomness comes from ``numpy.random.default_rng`` (PCG64) seeded from the
caller's integer seed, so every function is a pure function of its inputs.

The default corpus values (sparse noisy "LiDAR-like" source, dense cleaner
"depth-camera-like" target) are desk-scale stand-ins, not measured sensor
parameters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from fflogo.config import validate_config
from fflogo.pointcloud import PointCloud, apply_transform
from fflogo.transform import RigidTransform, rodrigues

SHAPES = ("plane-grid", "box", "sphere", "wavy-surface", "composite-room")
MIN_POINTS = 100


@dataclass(frozen=True)
class ModalitySpec:
    density_keep_fraction: float = 1.0
    noise_sigma: float = 0.0
    overlap_fraction: float = 1.0
    outlier_fraction: float = 0.0
    outlier_scale: float = 0.0

    def __post_init__(self) -> None:
        checks = {
            "density_keep_fraction": 0.0 < self.density_keep_fraction <= 1.0,
            "noise_sigma": self.noise_sigma >= 0.0,
            "overlap_fraction": 0.0 < self.overlap_fraction <= 1.0,
            "outlier_fraction": 0.0 <= self.outlier_fraction < 1.0,
            "outlier_scale": self.outlier_scale >= 0.0,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValueError(f"{name} out of range: {getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)


# desk-scale stand-ins for a sparse LiDAR-like source and a dense depth-camera-like target
DEFAULT_SPEC_K = ModalitySpec(0.2, 0.01, 0.7, 0.05, 0.1)
DEFAULT_SPEC_L = ModalitySpec(1.0, 0.005, 0.85, 0.05, 0.1)


@dataclass(frozen=True, eq=False)
class SyntheticPair:
    cloud_k: PointCloud
    cloud_l: PointCloud
    T_gt: RigidTransform
    seed: int
    spec_k: ModalitySpec = field(default_factory=ModalitySpec)
    spec_l: ModalitySpec = field(default_factory=ModalitySpec)
    pair_id: str = ""


# ---------------------------------------------------------------------------
# base shapes
# ---------------------------------------------------------------------------


def _rect(rng, n, origin, u, v):
    s = rng.random((n, 2))
    return origin + s[:, :1] * u + s[:, 1:] * v


def _box_surface(rng, n, lo, hi, bottom=True):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ex = hi - lo
    faces = [
        (lo + [0, 0, ex[2]], [ex[0], 0, 0], [0, ex[1], 0]),  # top
        (lo, [ex[0], 0, 0], [0, 0, ex[2]]),  # y = lo
        (lo + [0, ex[1], 0], [ex[0], 0, 0], [0, 0, ex[2]]),  # y = hi
        (lo, [0, ex[1], 0], [0, 0, ex[2]]),  # x = lo
        (lo + [ex[0], 0, 0], [0, ex[1], 0], [0, 0, ex[2]]),  # x = hi
    ]
    if bottom:
        faces.append((lo, [ex[0], 0, 0], [0, ex[1], 0]))
    return _mix(rng, n, [("rect", f) for f in faces])


def _sphere_surface(rng, n, center=(0.0, 0.0, 0.0), radius=1.0, upper_only=False):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    if upper_only:
        v[:, 2] = np.abs(v[:, 2])
    return np.asarray(center) + radius * v


def _area(kind, args):
    if kind == "rect":
        _, u, v = args
        return float(np.linalg.norm(np.cross(u, v)))
    if kind == "sphere":
        return 4.0 * np.pi * args[1] ** 2 * (0.5 if args[2] else 1.0)
    if kind == "cylinder":
        _, radius, height = args
        return 2.0 * np.pi * radius * height
    raise ValueError(kind)


def _cylinder_surface(rng, n, base, radius, height):
    t = rng.random(n) * 2 * np.pi
    z = rng.random(n) * height
    return np.asarray(base) + np.stack([radius * np.cos(t), radius * np.sin(t), z], axis=1)


def _mix(rng, n, parts):
    """Distribute n points over surface parts in proportion to their area."""
    areas = np.array([_area(k, a) for k, a in parts])
    counts = np.floor(n * areas / areas.sum()).astype(int)
    counts[np.argmax(areas)] += n - counts.sum()
    out = []
    for (kind, args), c in zip(parts, counts):
        if c == 0:
            continue
        if kind == "rect":
            out.append(_rect(rng, c, *map(np.asarray, args)))
        elif kind == "sphere":
            out.append(_sphere_surface(rng, c, *args))
        else:
            out.append(_cylinder_surface(rng, c, *args))
    return np.vstack(out)


def _composite_room(rng, n):
    # a room corner with furniture; no symmetry plane so features disambiguate
    parts = [
        ("rect", ((0, 0, 0), (3.0, 0, 0), (0, 2.4, 0))),  # floor
        ("rect", ((0, 0, 0), (0, 2.4, 0), (0, 0, 1.4))),  # wall x = 0
        ("rect", ((0, 0, 0), (3.0, 0, 0), (0, 0, 1.4))),  # wall y = 0
        ("rect", ((1.6, 2.4, 0), (1.4, 0, 0), (0, 0, 0.7))),  # low partition at y = 2.4
        ("rect", ((0.0, 0.9, 0.9), (0.35, 0, 0), (0, 0.9, 0))),  # wall shelf
        ("rect", ((0.35, 0.9, 0.9), (0, 0.9, 0), (0, 0, -0.05))),  # shelf edge
        ("rect", ((2.2, 0.0, 0.0), (0.8, 0.0, 0.0), (0.0, 0.55, 0.45))),  # ramp against wall y = 0
        ("sphere", ((2.3, 1.7, 0.0), 0.3, True)),  # dome
        ("cylinder", ((1.9, 0.6, 0.0), 0.15, 0.8)),  # pillar
    ]
    base = _mix(rng, n, parts)
    desk = _box_surface(rng, max(1, n // 9), (0.6, 1.3, 0.0), (1.4, 1.9, 0.55), bottom=False)
    cabinet = _box_surface(rng, max(1, n // 14), (0.4, 0.2, 0.0), (0.8, 0.5, 1.0), bottom=False)
    pts = np.vstack([base, desk, cabinet])
    # keep exactly n points
    return pts[rng.permutation(len(pts))[:n]]


def generate_base(shape: str, points: int, seed: int) -> PointCloud:
    """Deterministic base surface sample for ``(shape, points, seed)``."""
    if points < MIN_POINTS:
        raise ValueError(f"points must be >= {MIN_POINTS}")
    rng = np.random.default_rng(seed)
    if shape == "plane-grid":
        side = int(np.ceil(np.sqrt(points)))
        g = (np.arange(side) + 0.5) / side * 2.0 - 1.0
        xx, yy = np.meshgrid(g, g, indexing="ij")
        xy = np.stack([xx.ravel(), yy.ravel()], axis=1)[:points]
        xy = xy + rng.uniform(-0.25, 0.25, xy.shape) / side
        pts = np.hstack([xy, np.zeros((points, 1))])
    elif shape == "box":
        pts = _box_surface(rng, points, (-0.6, -0.4, -0.3), (0.6, 0.4, 0.3))
    elif shape == "sphere":
        pts = _sphere_surface(rng, points)
    elif shape == "wavy-surface":
        xy = rng.uniform(-1.0, 1.0, (points, 2))
        z = 0.15 * np.sin(3.0 * xy[:, 0]) * np.cos(2.0 * xy[:, 1]) + 0.05 * xy[:, 0] ** 2
        pts = np.hstack([xy, z[:, None]])
    elif shape == "composite-room":
        pts = _composite_room(rng, points)
    else:
        raise ValueError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    return PointCloud(pts)


# ---------------------------------------------------------------------------
# degradation and pairs
# ---------------------------------------------------------------------------


def _unit_vector(rng) -> NDArray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def degrade(cloud: PointCloud, spec: ModalitySpec, seed: int) -> PointCloud:
    """Thin, crop, add noise and inject outliers, in that order.

    Thinning keeps ``round(keep * n)`` points; cropping keeps the
    ``round(overlap * n)`` points lowest along a random direction; outliers are
    ``round(outlier_fraction * n)`` uniform points in the bounding box grown by
    ``outlier_scale``. Point order of survivors is preserved.

    Raises:
        ValueError: fewer than 100 points would remain.
    """
    rng = np.random.default_rng(seed)
    pts = cloud.points
    if spec.density_keep_fraction < 1.0:
        m = int(round(spec.density_keep_fraction * len(pts)))
        keep = np.sort(rng.choice(len(pts), size=m, replace=False))
        pts = pts[keep]
    if spec.overlap_fraction < 1.0:
        u = _unit_vector(rng)
        m = int(round(spec.overlap_fraction * len(pts)))
        order = np.argsort(pts @ u, kind="stable")
        pts = pts[np.sort(order[:m])]
    if len(pts) < MIN_POINTS:
        raise ValueError(f"degradation leaves {len(pts)} points (< {MIN_POINTS})")
    if spec.noise_sigma > 0.0:
        pts = pts + rng.normal(0.0, spec.noise_sigma, pts.shape)
    if spec.outlier_fraction > 0.0:
        m = int(round(spec.outlier_fraction * len(pts)))
        lo = pts.min(axis=0) - spec.outlier_scale
        hi = pts.max(axis=0) + spec.outlier_scale
        pts = np.vstack([pts, rng.uniform(lo, hi, (m, 3))])
    return PointCloud(pts)


def random_transform(rot_max_deg: float, trans_max: float, rng) -> RigidTransform:
    """Uniform axis, angle uniform in [0, rot_max], translation uniform in the ball of radius trans_max."""
    angle = np.deg2rad(rot_max_deg) * rng.random()
    R = rodrigues(_unit_vector(rng) * angle)
    t = _unit_vector(rng) * trans_max * rng.random() ** (1.0 / 3.0)
    return RigidTransform(R, t)


def generate_pair(
    base: PointCloud,
    spec_k: ModalitySpec,
    spec_l: ModalitySpec,
    rot_max: float,
    trans_max: float,
    seed: int,
    pair_id: str = "",
) -> SyntheticPair:
    """cloud_k = degrade(base); cloud_l = T_gt(degrade(base)), so T_gt maps K onto L."""
    ss = np.random.SeedSequence(seed)
    seed_k, seed_l, seed_t = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    T_gt = random_transform(rot_max, trans_max, np.random.default_rng(seed_t))
    cloud_k = degrade(base, spec_k, seed_k)
    cloud_l = apply_transform(degrade(base, spec_l, seed_l), T_gt)
    return SyntheticPair(cloud_k, cloud_l, T_gt, seed, spec_k, spec_l, pair_id)


# ---------------------------------------------------------------------------
# corpora on disk
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"

_SPEC_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "density_keep_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "noise_sigma": {"type": "number", "minimum": 0},
        "overlap_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "outlier_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "outlier_scale": {"type": "number", "minimum": 0},
    },
}

CORPUS_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "pairs": {"type": "integer", "minimum": 1},
        "shape": {"enum": list(SHAPES)},
        "base_points": {"type": "integer", "minimum": MIN_POINTS},
        "seed": {"type": "integer", "minimum": 0},
        "rot_max_deg": {"type": "number", "minimum": 0, "maximum": 180},
        "trans_max": {"type": "number", "minimum": 0},
        "spec_k": _SPEC_SCHEMA,
        "spec_l": _SPEC_SCHEMA,
    },
}


@dataclass(frozen=True)
class CorpusSpec:
    """What ``write_corpus`` generates. Defaults give the standard 50-pair benchmark."""

    pairs: int = 50
    shape: str = "composite-room"
    base_points: int = 15000
    seed: int = 0
    rot_max_deg: float = 45.0
    trans_max: float = 0.5
    spec_k: ModalitySpec = DEFAULT_SPEC_K
    spec_l: ModalitySpec = DEFAULT_SPEC_L

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> CorpusSpec:
        validate_config(doc, CORPUS_SCHEMA)
        doc = dict(doc)
        # partial modality blocks override the corpus defaults field by field
        for key, default in (("spec_k", DEFAULT_SPEC_K), ("spec_l", DEFAULT_SPEC_L)):
            if key in doc:
                doc[key] = replace(default, **doc[key])
        return cls(**doc)

    def pair_seeds(self, index: int) -> tuple[int, int]:
        """(base seed, pair seed) for pair ``index``, derived from the corpus seed."""
        state = np.random.SeedSequence([self.seed, index]).generate_state(2)
        return int(state[0]), int(state[1])


def corpus_pairs(spec: CorpusSpec):
    """Yield the corpus pairs in order without touching the disk."""
    for n in range(spec.pairs):
        base_seed, pair_seed = spec.pair_seeds(n)
        base = generate_base(spec.shape, spec.base_points, base_seed)
        yield generate_pair(base, spec.spec_k, spec.spec_l, spec.rot_max_deg, spec.trans_max, pair_seed,
                            pair_id=f"pair_{n:03d}")


def write_corpus(spec: CorpusSpec, out_dir: str | Path) -> Path:
    """Write every pair as two PLY files plus a JSON manifest; returns the manifest path."""
    from fflogo.io import save_cloud

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for pair in corpus_pairs(spec):
        src = f"{pair.pair_id}_source.ply"
        tgt = f"{pair.pair_id}_target.ply"
        save_cloud(pair.cloud_k, out / src)
        save_cloud(pair.cloud_l, out / tgt)
        entries.append(
            {
                "id": pair.pair_id,
                "seed": pair.seed,
                "source": src,
                "target": tgt,
                "T_gt": pair.T_gt.to_list(),
                "spec_k": pair.spec_k.to_dict(),
                "spec_l": pair.spec_l.to_dict(),
            }
        )
    manifest = out / MANIFEST
    manifest.write_text(json.dumps({"corpus": spec.to_dict(), "pairs": entries}, indent=2))
    return manifest
