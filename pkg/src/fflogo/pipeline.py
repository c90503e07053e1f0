"""End-to-end registration: coarse feature filtering, then key-region refinement.

Stages, in order: ``input`` -> ``downsample`` -> ``normals`` -> ``features``
-> ``matching`` -> ``coarse`` -> ``keyregion`` -> ``local`` -> ``fusion``.
A failure in any of them surfaces as :class:`RegistrationError` carrying the
stage name. The refinement arms share one front-end run: ``ff`` is the coarse
transform itself, ``go`` refines it with a single point-to-plane solve of the
whole downsampled source, ``logo`` solves every key region separately and
fuses the results.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from fflogo.config import PipelineConfig
from fflogo.errors import DegenerateGeometryError, ExtractorError, NoMutualMatchesError, RegistrationError
from fflogo.features import FeatureSet
from fflogo.keyregion import KeypointSet, PatchSet, aggregate_patches, farthest_point_sample
from fflogo.logo import FusionResult, LocalSolveResult, global_fuse, local_patch_optimize
from fflogo.matching import CoarseResult, CorrespondenceSet, estimate_coarse, gaussian_correlation, mutual_topk_filter, topk_for_matches
from fflogo.pointcloud import PointCloud, estimate_normals, voxel_downsample
from fflogo.transform import RigidTransform

log = logging.getLogger(__name__)

ARMS = ("ff", "go", "logo")
_ARM_FOR_REFINEMENT = {"none": "ff", "go": "go", "logo": "logo"}


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    T_c: RigidTransform
    T_f: RigidTransform
    locals: tuple[LocalSolveResult, ...]
    refinement: str
    arms: dict[str, RigidTransform]
    correspondences: CorrespondenceSet
    coarse: CoarseResult
    keypoints: KeypointSet | None = None
    patches: PatchSet | None = None
    fusion: FusionResult | None = None
    go: LocalSolveResult | None = None
    diagnostics: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "refinement": self.refinement,
            "T_c": self.T_c.to_list(),
            "T_f": self.T_f.to_list(),
            "arms": {name: T.to_list() for name, T in self.arms.items()},
            "T_key": [res.transform.to_list() for res in self.locals],
            "locals": [res.to_dict() for res in self.locals],
            "go": None if self.go is None else self.go.to_dict(),
            "fusion": None
            if self.fusion is None
            else {"used": list(self.fusion.used), "degraded": self.fusion.degraded, "reason": self.fusion.reason},
            "diagnostics": self.diagnostics,
        }
        if include_timing:
            d["timing"] = self.timing
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)


@dataclass(frozen=True, eq=False)
class FrontEnd:
    """Everything the refinement arms need, computed once per pair."""

    source: PointCloud  # downsampled source with normals
    target: PointCloud  # downsampled target with normals
    filtered_target: PointCloud  # target points kept by mutual filtering
    correspondences: CorrespondenceSet  # indices into source / target
    coarse: CoarseResult
    k: int
    diagnostics: dict


class _Timer:
    def __init__(self) -> None:
        self.times: dict[str, float] = {}

    def __call__(self, stage: str, t0: float) -> None:
        self.times[stage] = self.times.get(stage, 0.0) + time.perf_counter() - t0


def _prepare(cloud: PointCloud, cfg: PipelineConfig, which: str, timer: _Timer) -> PointCloud:
    t0 = time.perf_counter()
    try:
        down = voxel_downsample(cloud, cfg.voxel_size)
    except ValueError as exc:
        raise RegistrationError("downsample", f"{which}: {exc}") from exc
    timer("downsample", t0)
    t0 = time.perf_counter()
    if len(down) < cfg.features.normal_k + 1:
        raise RegistrationError("normals", f"{which}: {len(down)} points after downsampling, need > {cfg.features.normal_k}")
    out = estimate_normals(down, cfg.features.normal_k)
    timer("normals", t0)
    return out


def _features(src: PointCloud, tgt: PointCloud, cfg: PipelineConfig) -> tuple[FeatureSet, FeatureSet]:
    extractor = cfg.make_extractor()
    if cfg.features.extractor == "seeded-attention":
        # the pairwise embedding is quadratic, so attention runs on FPS nodes
        m = cfg.features.attention_max_points
        nodes_k = farthest_point_sample(src, min(m, len(src))).indices
        nodes_l = farthest_point_sample(tgt, min(m, len(tgt))).indices
        fk, fl = extractor.extract_pair(src.select(nodes_k), tgt.select(nodes_l))
        return FeatureSet(fk.features, nodes_k[fk.indices]), FeatureSet(fl.features, nodes_l[fl.indices])
    return extractor.extract_pair(src, tgt)


def _match_and_estimate(fk, fl, src, tgt, k, cfg, seed):
    S = gaussian_correlation(fk, fl)
    filt = mutual_topk_filter(S, k)
    corr = filt.correspondences.remap(fk.indices, fl.indices)
    m = cfg.matching
    coarse = estimate_coarse(
        corr, src, tgt,
        consensus=m.consensus,
        inlier_threshold=m.inlier_factor * cfg.voxel_size,
        max_iterations=m.consensus_iterations,
        max_validations=m.consensus_validations,
        edge_similarity=m.edge_similarity,
        seed=seed,
    )
    return corr, coarse


def run_front_end(cloud_k: PointCloud, cloud_l: PointCloud, config: PipelineConfig | None = None,
                  seed: int | None = None, timer: _Timer | None = None) -> FrontEnd:
    """Downsample, estimate normals, extract and match features, estimate T_c.

    If mutual filtering yields nothing usable, it is retried once with k + 1.
    """
    cfg = config or PipelineConfig()
    seed = cfg.seed if seed is None else seed
    timer = timer or _Timer()
    if len(cloud_k) == 0 or len(cloud_l) == 0:
        raise RegistrationError("input", "both clouds must be non-empty")

    src = _prepare(cloud_k, cfg, "source", timer)
    tgt = _prepare(cloud_l, cfg, "target", timer)

    t0 = time.perf_counter()
    try:
        fk, fl = _features(src, tgt, cfg)
    except (ExtractorError, ValueError) as exc:
        raise RegistrationError("features", str(exc)) from exc
    if len(fk) == 0 or len(fl) == 0:
        raise RegistrationError("features", f"no features ({len(fk)} source, {len(fl)} target)")
    timer("features", t0)

    t0 = time.perf_counter()
    k0 = topk_for_matches(min(len(fk), len(fl)), cfg.matching.topk_schedule)
    k = k0
    try:
        corr, coarse = _match_and_estimate(fk, fl, src, tgt, k, cfg, seed)
    except (NoMutualMatchesError, DegenerateGeometryError) as first:
        k = k0 + 1
        log.info("matching with k=%d failed (%s); retrying with k=%d", k0, first, k)
        try:
            corr, coarse = _match_and_estimate(fk, fl, src, tgt, k, cfg, seed)
        except NoMutualMatchesError as exc:
            raise RegistrationError("matching", str(exc)) from exc
        except DegenerateGeometryError as exc:
            raise RegistrationError("coarse", str(exc)) from exc
    timer("matching", t0)

    filtered_target = tgt.select(np.unique(corr.j))
    diag = {
        "points_raw": [len(cloud_k), len(cloud_l)],
        "points_downsampled": [len(src), len(tgt)],
        "features": [len(fk), len(fl)],
        "topk": k,
        "topk_fallback": k != k0,
        "correspondences": len(corr),
        "filtered_source": int(len(np.unique(corr.i))),
        "filtered_target": len(filtered_target),
        "coarse_inliers": coarse.inlier_count,
        "coarse_hypotheses": coarse.hypotheses,
    }
    diag.update({f"coarse_{key}": val for key, val in coarse.diagnostics.items()})
    return FrontEnd(src, tgt, filtered_target, corr, coarse, k, diag)


def refine_global(front: FrontEnd, config: PipelineConfig) -> LocalSolveResult:
    """The ``go`` arm: one point-to-plane solve of the whole source against the filtered target."""
    return local_patch_optimize(front.source, front.filtered_target, front.coarse.transform,
                                config.local_params(), patch_id=-1)


def refine_key_regions(front: FrontEnd, config: PipelineConfig):
    """The ``logo`` arm: FPS key regions, per-patch solves from T_c, keypoint fusion."""
    kr = config.keyregion
    n = min(kr.n_keypoints, len(front.source))
    try:
        keys = farthest_point_sample(front.source, n)
        patches = aggregate_patches(front.source, keys, kr.radius_factor, kr.mode, kr.knn_cap, kr.min_patch_size)
    except ValueError as exc:
        raise RegistrationError("keyregion", str(exc)) from exc

    params = config.local_params()
    T_c = front.coarse.transform
    target = front.filtered_target
    results = []
    for pid, patch in enumerate(patches):
        if not patch.viable:
            results.append(LocalSolveResult(pid, T_c, float("nan"), 0, False, 0, "patch too small"))
            continue
        results.append(local_patch_optimize(patch.cloud, target, T_c, params, target.index, pid))
    fusion = global_fuse(keys, results, fallback=T_c)
    return keys, patches, tuple(results), fusion


def ff_logo_register(
    cloud_k: PointCloud,
    cloud_l: PointCloud,
    config: PipelineConfig | None = None,
    *,
    seed: int | None = None,
    arms: tuple[str, ...] | None = None,
) -> RegistrationResult:
    """Register ``cloud_k`` onto ``cloud_l``; ``T_f`` maps source coordinates into the target frame.

    ``arms`` lists extra refinement arms to evaluate from the same front end
    (for ablations); the arm selected by ``config.refinement`` always runs and
    provides ``T_f``.
    """
    cfg = config or PipelineConfig()
    main = _ARM_FOR_REFINEMENT[cfg.refinement]
    wanted = {main, "ff", *(arms or ())}
    unknown = wanted - set(ARMS)
    if unknown:
        raise ValueError(f"unknown arms {sorted(unknown)}; expected a subset of {ARMS}")

    timer = _Timer()
    front = run_front_end(cloud_k, cloud_l, cfg, seed, timer)
    T_c = front.coarse.transform
    diag = dict(front.diagnostics)
    out_arms = {"ff": T_c}

    go = None
    if "go" in wanted:
        t0 = time.perf_counter()
        go = refine_global(front, cfg)
        timer("go", t0)
        # the solver returns its last accepted pose, T_c if it never moved
        out_arms["go"] = go.transform
        diag["go_status"] = go.status

    keys = patches = fusion = None
    local_results: tuple[LocalSolveResult, ...] = ()
    if "logo" in wanted:
        t0 = time.perf_counter()
        keys, patches, local_results, fusion = refine_key_regions(front, cfg)
        timer("local", t0)
        out_arms["logo"] = fusion.transform
        diag.update(
            {
                "keypoints": len(keys),
                "covering_radius": keys.covering_radius,
                "aggregation_radius": patches.aggregation_radius,
                "patch_sizes": [len(p) for p in patches],
                "excluded_patches": [r.patch_id for r in local_results if not r.converged],
                "fusion_degraded": fusion.degraded,
            }
        )

    return RegistrationResult(
        T_c=T_c,
        T_f=out_arms[main],
        locals=local_results,
        refinement=cfg.refinement,
        arms={name: out_arms[name] for name in ARMS if name in out_arms},
        correspondences=front.correspondences,
        coarse=front.coarse,
        keypoints=keys,
        patches=patches,
        fusion=fusion,
        go=go,
        diagnostics=diag,
        timing=timer.times,
    )
