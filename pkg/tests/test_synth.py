import json

import numpy as np
import pytest
from scipy.spatial import cKDTree

from fflogo.errors import ConfigError
from fflogo.synth import (
    DEFAULT_SPEC_K,
    DEFAULT_SPEC_L,
    CorpusSpec,
    ModalitySpec,
    corpus_pairs,
    degrade,
    generate_base,
    generate_pair,
    random_transform,
    write_corpus,
)
from fflogo.transform import RigidTransform


def test_base_shapes():
    plane = generate_base("plane-grid", 400, 0)
    assert len(plane) == 400 and np.all(plane.points[:, 2] == 0.0)
    sphere = generate_base("sphere", 500, 1)
    assert np.allclose(np.linalg.norm(sphere.points, axis=1), 1.0, atol=1e-9)
    for shape in ("box", "wavy-surface", "composite-room"):
        assert len(generate_base(shape, 1234, 2)) == 1234
    assert np.array_equal(generate_base("composite-room", 2000, 5).points, generate_base("composite-room", 2000, 5).points)
    with pytest.raises(ValueError):
        generate_base("torus", 500, 0)
    with pytest.raises(ValueError):
        generate_base("box", 99, 0)


def test_modality_spec_ranges():
    for bad in ({"density_keep_fraction": 0.0}, {"noise_sigma": -0.1}, {"overlap_fraction": 1.5}, {"outlier_fraction": 1.0}):
        with pytest.raises(ValueError):
            ModalitySpec(**bad)


def test_identity_degradation_keeps_cloud():
    base = generate_base("box", 500, 3)
    assert np.array_equal(degrade(base, ModalitySpec(), 9).points, base.points)


def test_thinning_count_is_exact():
    base = generate_base("box", 1000, 3)
    out = degrade(base, ModalitySpec(density_keep_fraction=0.2), 4)
    assert len(out) == 200
    assert np.array_equal(out.points, degrade(base, ModalitySpec(density_keep_fraction=0.2), 4).points)
    with pytest.raises(ValueError):
        degrade(base, ModalitySpec(density_keep_fraction=0.05), 4)


def test_noise_stays_within_five_sigma():
    base = generate_base("sphere", 20000, 0)
    out = degrade(base, ModalitySpec(noise_sigma=0.005), 1)
    disp = np.abs(out.points - base.points)
    assert np.mean(disp.max(axis=1) < 5 * 0.005) >= 0.999


def test_outliers_stay_in_grown_box():
    base = generate_base("box", 2000, 0)
    out = degrade(base, ModalitySpec(outlier_fraction=0.1, outlier_scale=0.2), 2)
    assert len(out) == 2200
    extra = out.points[2000:]
    assert np.all(extra >= base.points.min(axis=0) - 0.2) and np.all(extra <= base.points.max(axis=0) + 0.2)


def test_random_transform_bounds(rng):
    for _ in range(200):
        T = random_transform(45.0, 0.5, rng)
        angle = np.degrees(np.arccos(np.clip((np.trace(T.rotation) - 1) / 2, -1, 1)))
        assert angle <= 45.0 + 1e-9 and np.linalg.norm(T.translation) <= 0.5 + 1e-12


def test_zero_offsets_give_identity_and_pairs_are_deterministic():
    base = generate_base("composite-room", 3000, 1)
    pair = generate_pair(base, DEFAULT_SPEC_K, DEFAULT_SPEC_L, 0.0, 0.0, seed=8)
    assert pair.T_gt.allclose(RigidTransform.identity(), atol=0)
    again = generate_pair(base, DEFAULT_SPEC_K, DEFAULT_SPEC_L, 0.0, 0.0, seed=8)
    assert np.array_equal(pair.cloud_k.points, again.cloud_k.points)
    assert np.array_equal(pair.cloud_l.points, again.cloud_l.points)


def test_overlap_ground_truth():
    spec = CorpusSpec(pairs=20)
    nominal = spec.spec_k.overlap_fraction * spec.spec_l.overlap_fraction
    radius = 3 * np.hypot(spec.spec_k.noise_sigma, spec.spec_l.noise_sigma)
    pre_crop = round(spec.spec_k.density_keep_fraction * spec.base_points)
    fractions = []
    for pair in corpus_pairs(spec):
        d, _ = cKDTree(pair.T_gt.inverse().apply(pair.cloud_l.points)).query(pair.cloud_k.points)
        fractions.append(np.sum(d <= radius) / pre_crop)
    fractions = np.array(fractions)
    # two independent half-space crops: the per-pair intersection depends on their angle
    assert abs(fractions.mean() - nominal) <= 0.1 * nominal
    assert np.all(fractions >= nominal - 0.1)
    assert np.all(fractions <= min(spec.spec_k.overlap_fraction, spec.spec_l.overlap_fraction) + 0.02)


def test_corpus_on_disk_is_deterministic(tmp_path):
    spec = CorpusSpec(pairs=3, base_points=3000, seed=11)
    m1 = write_corpus(spec, tmp_path / "a")
    m2 = write_corpus(spec, tmp_path / "b")
    assert m1.read_bytes() == m2.read_bytes()
    doc = json.loads(m1.read_text())
    assert [p["id"] for p in doc["pairs"]] == ["pair_000", "pair_001", "pair_002"]
    for entry in doc["pairs"]:
        assert (tmp_path / "a" / entry["source"]).read_bytes() == (tmp_path / "b" / entry["source"]).read_bytes()
        assert RigidTransform.from_list(entry["T_gt"]).allclose(
            next(p for p in corpus_pairs(spec) if p.pair_id == entry["id"]).T_gt, atol=0
        )
    assert doc["corpus"]["seed"] == 11


def test_corpus_spec_from_dict():
    spec = CorpusSpec.from_dict({"pairs": 4, "spec_k": {"noise_sigma": 0.02}})
    assert spec.pairs == 4
    assert spec.spec_k.noise_sigma == 0.02
    assert spec.spec_k.density_keep_fraction == DEFAULT_SPEC_K.density_keep_fraction
    with pytest.raises(ConfigError) as err:
        CorpusSpec.from_dict({"spec_l": {"noise_sigma": "loud"}})
    assert "spec_l.noise_sigma" in str(err.value)
    with pytest.raises(ConfigError):
        CorpusSpec.from_dict({"pears": 3})
