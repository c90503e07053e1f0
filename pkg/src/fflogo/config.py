"""Pipeline configuration: defaults, JSON schema validation, loading."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from fflogo.embedding import EmbeddingConfig
from fflogo.errors import ConfigError
from fflogo.features import EXTRACTORS, FeatureExtractor, FPFHExtractor, SeededAttentionExtractor
from fflogo.logo import LocalSolveParams

REFINEMENTS = ("none", "go", "logo")


@dataclass(frozen=True)
class FeatureConfig:
    extractor: str = "classical-descriptor"
    normal_k: int = 20
    # descriptor support radius, in voxels
    descriptor_radius_factor: float = 5.0
    sigma_d: float | None = None  # meters; None -> 4 * voxel_size
    sigma_a_deg: float = 15.0
    d_t: int = 64
    k_angular: int = 3
    attention_seed: int = 0
    attention_blocks: int = 2
    attention_max_points: int = 256


@dataclass(frozen=True)
class MatchingConfig:
    # [[max candidate matches or null, k], ...]
    topk_schedule: tuple[tuple[int | None, int], ...] = ((1000, 1), (2500, 2), (None, 3))
    consensus: bool = True
    consensus_iterations: int = 50000
    consensus_validations: int = 5000
    edge_similarity: float = 0.9
    # inlier distance, in voxels
    inlier_factor: float = 3.0


@dataclass(frozen=True)
class KeyRegionConfig:
    n_keypoints: int = 8
    radius_factor: float = 1.5
    mode: str = "radius"
    knn_cap: int = 512
    min_patch_size: int = 10


@dataclass(frozen=True)
class LocalConfig:
    k_candidates: int = 5
    # correspondence gate, in voxels
    gate_factor: float = 3.0
    max_iterations: int = 50
    tolerance: float = 1e-6
    min_correspondences: int = 6
    degeneracy_ratio: float = 1e-6


@dataclass(frozen=True)
class MetricConfig:
    re_threshold_deg: float = 15.0
    te_threshold_m: float = 0.3


@dataclass(frozen=True)
class PipelineConfig:
    voxel_size: float = 0.05
    features: FeatureConfig = field(default_factory=FeatureConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    keyregion: KeyRegionConfig = field(default_factory=KeyRegionConfig)
    local: LocalConfig = field(default_factory=LocalConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    refinement: str = "logo"
    seed: int = 0

    # -- derived objects ---------------------------------------------------

    def embedding_config(self) -> EmbeddingConfig:
        f = self.features
        sigma_d = f.sigma_d if f.sigma_d is not None else 4.0 * self.voxel_size
        return EmbeddingConfig(sigma_d, float(np.deg2rad(f.sigma_a_deg)), f.d_t, f.k_angular)

    def make_extractor(self) -> FeatureExtractor:
        f = self.features
        if f.extractor == "classical-descriptor":
            return FPFHExtractor(radius=f.descriptor_radius_factor * self.voxel_size, normal_k=f.normal_k)
        return SeededAttentionExtractor(
            self.embedding_config(), seed=f.attention_seed, n_blocks=f.attention_blocks,
            max_points=f.attention_max_points,
        )

    def local_params(self) -> LocalSolveParams:
        c = self.local
        return LocalSolveParams(
            k_candidates=c.k_candidates,
            max_distance=c.gate_factor * self.voxel_size,
            max_iterations=c.max_iterations,
            tolerance=c.tolerance,
            min_correspondences=c.min_correspondences,
            degeneracy_ratio=c.degeneracy_ratio,
        )

    def with_overrides(self, **changes: Any) -> PipelineConfig:
        """Copy with top-level or dotted (``"keyregion.n_keypoints"``) overrides."""
        top = {}
        nested: dict[str, dict[str, Any]] = {}
        for key, value in changes.items():
            key = key.replace("__", ".")
            if "." in key:
                section, name = key.split(".", 1)
                nested.setdefault(section, {})[name] = value
            else:
                top[key] = value
        for section, vals in nested.items():
            top[section] = replace(getattr(self, section), **vals)
        cfg = replace(self, **top)
        validate_config(cfg.to_dict())
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["matching"]["topk_schedule"] = [list(x) for x in self.matching.topk_schedule]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_POS = {"type": "number", "exclusiveMinimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}

CONFIG_SCHEMA: dict = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "voxel_size": _POS,
        "refinement": {"enum": list(REFINEMENTS)},
        "seed": _NONNEG_INT,
        "features": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "extractor": {"enum": list(EXTRACTORS)},
                "normal_k": {"type": "integer", "minimum": 3},
                "descriptor_radius_factor": _POS,
                "sigma_d": {"anyOf": [_POS, {"type": "null"}]},
                "sigma_a_deg": _POS,
                "d_t": {"type": "integer", "minimum": 2, "multipleOf": 2},
                "k_angular": _POS_INT,
                "attention_seed": _NONNEG_INT,
                "attention_blocks": _POS_INT,
                "attention_max_points": {"type": "integer", "minimum": 8},
            },
        },
        "matching": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "topk_schedule": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "array",
                        "prefixItems": [{"anyOf": [_POS_INT, {"type": "null"}]}, _POS_INT],
                        "minItems": 2,
                        "maxItems": 2,
                    },
                },
                "consensus": {"type": "boolean"},
                "consensus_iterations": _POS_INT,
                "consensus_validations": _POS_INT,
                "edge_similarity": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "inlier_factor": _POS,
            },
        },
        "keyregion": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_keypoints": _POS_INT,
                "radius_factor": _POS,
                "mode": {"enum": ["radius", "knn"]},
                "knn_cap": _POS_INT,
                "min_patch_size": _POS_INT,
            },
        },
        "local": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k_candidates": _POS_INT,
                "gate_factor": _POS,
                "max_iterations": _POS_INT,
                "tolerance": _POS,
                "min_correspondences": {"type": "integer", "minimum": 6},
                "degeneracy_ratio": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"re_threshold_deg": _POS, "te_threshold_m": _POS},
        },
    },
}


def _field_path(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        name = extra[0] if extra else "?"
        return f"{path}.{name}" if path else name
    return path or "<root>"


def validate_config(doc: dict, schema: dict = CONFIG_SCHEMA) -> None:
    """Raise ConfigError naming the first offending field."""
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _field_path(err))


def config_from_dict(doc: dict) -> PipelineConfig:
    validate_config(doc)
    sections = {
        "features": FeatureConfig,
        "matching": MatchingConfig,
        "keyregion": KeyRegionConfig,
        "local": LocalConfig,
        "metrics": MetricConfig,
    }
    kwargs: dict[str, Any] = {}
    for f in fields(PipelineConfig):
        if f.name not in doc:
            continue
        if f.name in sections:
            sub = dict(doc[f.name])
            if f.name == "matching" and "topk_schedule" in sub:
                sub["topk_schedule"] = tuple(tuple(x) for x in sub["topk_schedule"])
            kwargs[f.name] = sections[f.name](**sub)
        else:
            kwargs[f.name] = doc[f.name]
    return PipelineConfig(**kwargs)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(doc)
