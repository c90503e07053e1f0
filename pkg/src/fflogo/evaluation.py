"""Registration metrics, recall, and the benchmark harness.

RE is the geodesic angle between two rotations in degrees, TE the Euclidean
distance between translations in meters. A pair counts as recalled when both
are strictly below their thresholds; mean RE/TE are taken over recalled pairs
only.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike

from fflogo.config import PipelineConfig
from fflogo.errors import CloudFormatError, RegistrationError
from fflogo.io import load_cloud
from fflogo.pipeline import ARMS, ff_logo_register
from fflogo.pointcloud import PointCloud
from fflogo.synth import MANIFEST
from fflogo.transform import RigidTransform

log = logging.getLogger(__name__)

_ROT_TOL = 1e-6


def _check_rotation(R: ArrayLike, name: str) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError(f"{name} must be a finite 3x3 matrix")
    if np.abs(R.T @ R - np.eye(3)).max() > _ROT_TOL or abs(np.linalg.det(R) - 1.0) > _ROT_TOL:
        raise ValueError(f"{name} is not a rotation matrix")
    return R


def rotation_error(R_hat: ArrayLike, R: ArrayLike) -> float:
    """Geodesic distance in degrees: arccos((tr(R_hat R^T) - 1) / 2), argument clamped to [-1, 1]."""
    R_hat = _check_rotation(R_hat, "R_hat")
    R = _check_rotation(R, "R")
    c = (np.trace(R_hat @ R.T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def translation_error(t_hat: ArrayLike, t: ArrayLike) -> float:
    return float(np.linalg.norm(np.asarray(t_hat, dtype=np.float64) - np.asarray(t, dtype=np.float64)))


@dataclass(frozen=True)
class PairEvaluation:
    pair_id: str
    re: float
    te: float
    recalled: bool
    arm: str = "logo"
    repeat: int = 0
    # stage name when registration failed; the pair is then scored against the identity
    failed: str | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.re <= 180.0) or not self.te >= 0.0:
            raise ValueError(f"RE/TE out of range: {self.re}, {self.te}")


def evaluate_transform(
    pair_id: str,
    T_est: RigidTransform,
    T_gt: RigidTransform,
    re_thresh: float = 15.0,
    te_thresh: float = 0.3,
    **extra,
) -> PairEvaluation:
    re = rotation_error(T_est.rotation, T_gt.rotation)
    te = translation_error(T_est.translation, T_gt.translation)
    return PairEvaluation(pair_id, re, te, re < re_thresh and te < te_thresh, **extra)


def _is_recalled(e: PairEvaluation, re_thresh: float, te_thresh: float) -> bool:
    return e.re < re_thresh and e.te < te_thresh


def recall(evals: Sequence[PairEvaluation], re_thresh: float = 15.0, te_thresh: float = 0.3) -> float:
    """Fraction of evaluations with RE < re_thresh and TE < te_thresh."""
    if len(evals) == 0:
        raise ValueError("recall of an empty evaluation set")
    return sum(_is_recalled(e, re_thresh, te_thresh) for e in evals) / len(evals)


def recalled_means(
    evals: Sequence[PairEvaluation], re_thresh: float = 15.0, te_thresh: float = 0.3
) -> tuple[float, float]:
    """Mean (RE, TE) over recalled evaluations; NaN when none were recalled."""
    hits = [e for e in evals if _is_recalled(e, re_thresh, te_thresh)]
    if not hits:
        return math.nan, math.nan
    return float(np.mean([e.re for e in hits])), float(np.mean([e.te for e in hits]))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairRecord:
    """A lazily loaded benchmark pair; ``load`` returns (source, target, T_gt)."""

    pair_id: str
    load: Callable[[], tuple[PointCloud, PointCloud, RigidTransform]]


class _FileLoader:
    # a plain class rather than a closure so records can be sent to worker processes
    def __init__(self, source: Path, target: Path, T_gt: RigidTransform):
        self.source, self.target, self.T_gt = source, target, T_gt

    def __call__(self) -> tuple[PointCloud, PointCloud, RigidTransform]:
        return load_cloud(self.source), load_cloud(self.target), self.T_gt


def load_corpus(directory: str | Path) -> list[PairRecord]:
    """Pairs listed in a corpus manifest, sorted by id."""
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    try:
        doc = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise CloudFormatError(f"invalid manifest JSON: {exc.msg}", str(manifest), exc.lineno) from None
    records = []
    for entry in doc.get("pairs", []):
        T = RigidTransform.from_list(entry["T_gt"])
        records.append(PairRecord(entry["id"], _FileLoader(directory / entry["source"], directory / entry["target"], T)))
    return sorted(records, key=lambda r: r.pair_id)


def _read_matrix(path: Path) -> RigidTransform:
    rows = [line.split() for line in path.read_text().splitlines() if line.strip() and not line.startswith("#")]
    M = np.array([[float(v) for v in row] for row in rows[-4:]])
    if M.shape != (4, 4):
        raise CloudFormatError("expected a 4x4 matrix", str(path))
    return RigidTransform.from_matrix(M, reorthonormalize=True)


class _LazyGt:
    def __init__(self, source: Path, target: Path, gt: Path):
        self.source, self.target, self.gt = source, target, gt

    def __call__(self):
        return load_cloud(self.source), load_cloud(self.target), _read_matrix(self.gt)


def load_3dcsr(root: str | Path) -> list[PairRecord]:
    """Cross-source pairs laid out as one directory per pair.

    Each pair directory holds two cloud files (ply/pcd, the first in sorted
    order is the source) and a ground-truth 4x4 text matrix named ``T_gt.txt``
    or ``gt.txt`` mapping source to target. Directories that do not match are
    skipped with a warning.
    """
    root = Path(root)
    records = []
    for d in sorted(p for p in root.rglob("*") if p.is_dir()):
        clouds = sorted(p for p in d.iterdir() if p.suffix.lower() in (".ply", ".pcd"))
        gt = next((d / n for n in ("T_gt.txt", "gt.txt") if (d / n).is_file()), None)
        if len(clouds) != 2 or gt is None:
            if clouds:
                log.warning("skipping %s: expected two clouds and a ground-truth matrix", d)
            continue
        records.append(PairRecord(str(d.relative_to(root)), _LazyGt(clouds[0], clouds[1], gt)))
    return records


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArmSummary:
    recall: float
    mean_re: float
    mean_te: float
    evaluated: int


@dataclass(frozen=True, eq=False)
class BenchmarkReport:
    evaluations: tuple[PairEvaluation, ...]
    arm: str  # arm behind the headline numbers
    arms: dict[str, ArmSummary]
    config: dict
    repeats: int
    read_failures: tuple[str, ...] = ()
    seconds_per_pair: dict[str, float] = field(default_factory=dict)

    @property
    def recall(self) -> float:
        return self.arms[self.arm].recall

    @property
    def mean_re(self) -> float:
        return self.arms[self.arm].mean_re

    @property
    def mean_te(self) -> float:
        return self.arms[self.arm].mean_te

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "arm": self.arm,
            "recall": self.recall,
            "mean_re_deg": _json_num(self.mean_re),
            "mean_te_m": _json_num(self.mean_te),
            "repeats": self.repeats,
            "arms": {
                name: {**asdict(s), "mean_re": _json_num(s.mean_re), "mean_te": _json_num(s.mean_te)}
                for name, s in self.arms.items()
            },
            "read_failures": list(self.read_failures),
            "evaluations": [asdict(e) for e in self.evaluations],
            "config": self.config,
        }
        if include_timing:
            d["seconds_per_pair"] = self.seconds_per_pair
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'arm':<6} {'recall':>7} {'RE(deg)':>8} {'TE(m)':>8} {'n':>5}"]
        for name, s in self.arms.items():
            lines.append(f"{name:<6} {s.recall:>7.3f} {s.mean_re:>8.3f} {s.mean_te:>8.4f} {s.evaluated:>5d}")
        if self.read_failures:
            lines.append(f"unreadable pairs: {len(self.read_failures)}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["pair_id", "arm", "repeat", "re_deg", "te_m", "recalled", "failed"])
        for e in self.evaluations:
            writer.writerow([e.pair_id, e.arm, e.repeat, repr(e.re), repr(e.te), int(e.recalled), e.failed or ""])
        return buf.getvalue()


def _json_num(x: float) -> float | None:
    return None if math.isnan(x) else x


def _run_pair(record: PairRecord, config: PipelineConfig, repeats: int, arms: tuple[str, ...]):
    """All repeats of one pair; returns (evaluations, seconds) or None when unreadable."""
    try:
        cloud_k, cloud_l, T_gt = record.load()
    except (OSError, CloudFormatError, ValueError) as exc:
        log.warning("cannot read pair %s: %s", record.pair_id, exc)
        return None
    m = config.metrics
    evals = []
    t0 = time.perf_counter()
    for rep in range(repeats):
        try:
            result = ff_logo_register(cloud_k, cloud_l, config, seed=config.seed + rep, arms=arms)
            outcome = {a: (result.arms[a], None) for a in arms}
        except RegistrationError as exc:
            log.warning("pair %s repeat %d failed: %s", record.pair_id, rep, exc)
            outcome = {a: (RigidTransform.identity(), exc.stage) for a in arms}
        for a in arms:
            T, failed = outcome[a]
            evals.append(evaluate_transform(record.pair_id, T, T_gt, m.re_threshold_deg, m.te_threshold_m,
                                            arm=a, repeat=rep, failed=failed))
    return evals, (time.perf_counter() - t0) / repeats


def run_benchmark(
    dataset: Iterable[PairRecord],
    config: PipelineConfig | None = None,
    repeats: int = 10,
    arms: Sequence[str] | None = None,
    workers: int = 1,
) -> BenchmarkReport:
    """Register every pair ``repeats`` times, varying only the seed, and aggregate.

    ``arms`` (default: the configured refinement only) selects which of
    ``ff``/``go``/``logo`` to score; all share one front-end run per repeat.
    Unreadable pairs are skipped and listed in ``read_failures``.
    """
    cfg = config or PipelineConfig()
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    main = {"none": "ff", "go": "go", "logo": "logo"}[cfg.refinement]
    arm_list = tuple(a for a in ARMS if a in set(arms or (main,)) | {main})
    records = sorted(dataset, key=lambda r: r.pair_id)
    if not records:
        raise ValueError("empty dataset")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_pair, records, [cfg] * len(records), [repeats] * len(records),
                                    [arm_list] * len(records)))
    else:
        outputs = [_run_pair(r, cfg, repeats, arm_list) for r in records]

    evals: list[PairEvaluation] = []
    failures = []
    seconds = {}
    for rec, out in zip(records, outputs):
        if out is None:
            failures.append(rec.pair_id)
            continue
        evals.extend(out[0])
        seconds[rec.pair_id] = out[1]
    if failures:
        log.warning("%d pair(s) could not be read and were excluded", len(failures))
    if not evals:
        raise ValueError("no pair could be evaluated")

    m = cfg.metrics
    summaries = {}
    for a in arm_list:
        sub = [e for e in evals if e.arm == a]
        mre, mte = recalled_means(sub, m.re_threshold_deg, m.te_threshold_m)
        summaries[a] = ArmSummary(recall(sub, m.re_threshold_deg, m.te_threshold_m), mre, mte, len(sub))
    return BenchmarkReport(tuple(evals), main, summaries, cfg.to_dict(), repeats, tuple(failures), seconds)
