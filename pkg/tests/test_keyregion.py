import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fflogo.keyregion import aggregate_patches, farthest_point_sample
from fflogo.pointcloud import PointCloud
from oracles import fps_reference


def test_square_example():
    # corners of a unit square plus its center: the center is picked first
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0.5, 0.5, 0]])
    keys = farthest_point_sample(PointCloud(pts), 3)
    # every corner stays within sqrt(0.5) of the center, so each step is a tie won by the lowest index
    assert keys.indices.tolist() == [4, 0, 1]
    assert keys.covering_radius == pytest.approx(np.sqrt(0.5), abs=1e-15)


def test_exhaustion_and_errors():
    pts = np.random.default_rng(0).normal(size=(6, 3))
    keys = farthest_point_sample(PointCloud(pts), 6)
    assert sorted(keys.indices.tolist()) == list(range(6))
    assert keys.covering_radius == 0.0
    with pytest.raises(ValueError):
        farthest_point_sample(PointCloud(pts), 7)
    with pytest.raises(ValueError):
        farthest_point_sample(PointCloud(pts), 0)


def test_matches_reference_on_lattice_ties():
    g = np.arange(3.0)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = pts[np.random.default_rng(2).permutation(len(pts))]
    for n in (1, 2, 4, 8, 27):
        ref, cover = fps_reference(pts, n)
        keys = farthest_point_sample(PointCloud(pts), n)
        assert keys.indices.tolist() == ref
        assert keys.covering_radius == pytest.approx(cover, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)), elements=st.floats(-5, 5)), st.integers(1, 8))
def test_matches_reference_property(pts, n):
    n = min(n, len(pts))
    ref, cover = fps_reference(pts, n)
    keys = farthest_point_sample(PointCloud(pts), n)
    # squared vs plain distances may order float-level near ties differently
    d_ref = [min(np.linalg.norm(pts[i] - pts[s]) for s in ref[:m]) for m, i in enumerate(ref) if m]
    d_got = [min(np.linalg.norm(pts[i] - pts[s]) for s in keys.indices[:m]) for m, i in enumerate(keys.indices) if m]
    assert np.allclose(d_got, d_ref, rtol=1e-12, atol=1e-12)
    assert keys.covering_radius == pytest.approx(cover, rel=1e-12, abs=1e-12)


def test_selected_points_are_spread(rng):
    pts = rng.uniform(-1, 1, (800, 3))
    keys = farthest_point_sample(PointCloud(pts), 16)
    d = np.linalg.norm(keys.points[:, None] - keys.points[None], axis=2)
    d[np.diag_indices(16)] = np.inf
    assert d.min() >= keys.covering_radius - 1e-12


def test_covering_radius_shrinks_with_more_keypoints(rng):
    cloud = PointCloud(rng.uniform(-1, 1, (500, 3)))
    radii = [farthest_point_sample(cloud, n).covering_radius for n in (1, 2, 4, 8, 16, 32)]
    assert all(a >= b for a, b in zip(radii, radii[1:]))


def test_patches_cover_cube_and_respect_radius(rng):
    cloud = PointCloud(rng.uniform(-1, 1, (3000, 3)))
    keys = farthest_point_sample(cloud, 8)
    patches = aggregate_patches(cloud, keys)
    assert patches.aggregation_radius == pytest.approx(1.5 * keys.covering_radius)
    # covering radius x 1.5 reaches every point
    assert patches.coverage(len(cloud)) == 1.0
    for p, k in zip(patches, keys.indices):
        assert p.keypoint == k and k in p.indices
        assert np.all(np.linalg.norm(cloud.points[p.indices] - cloud.points[k], axis=1) <= patches.aggregation_radius)
        assert p.viable


def test_coverage_grows_with_radius_factor(rng):
    cloud = PointCloud(rng.uniform(-1, 1, (1500, 3)))
    keys = farthest_point_sample(cloud, 6)
    cov = [aggregate_patches(cloud, keys, f).coverage(len(cloud)) for f in (0.25, 0.5, 1.0, 1.5)]
    assert all(a <= b for a, b in zip(cov, cov[1:]))
    assert cov[-1] == 1.0


def test_tiny_radius_leaves_single_point_patches(rng):
    cloud = PointCloud(rng.uniform(-1, 1, (200, 3)))
    keys = farthest_point_sample(cloud, 4)
    patches = aggregate_patches(cloud, keys, radius_factor=1e-9)
    assert [len(p) for p in patches] == [1, 1, 1, 1]
    assert not any(p.viable for p in patches)
    with pytest.raises(ValueError):
        aggregate_patches(cloud, keys, radius_factor=0.0)
    with pytest.raises(ValueError):
        aggregate_patches(cloud, keys, mode="ball")


def test_knn_mode_caps_patch_size(rng, tmp_path):
    cloud = PointCloud(rng.uniform(-1, 1, (2000, 3)))
    keys = farthest_point_sample(cloud, 4)
    full = aggregate_patches(cloud, keys)
    capped = aggregate_patches(cloud, keys, mode="knn", knn_cap=50)
    for a, b in zip(full, capped):
        assert len(b) == 50
        assert set(b.indices.tolist()) <= set(a.indices.tolist())
    paths = capped.dump_ply(tmp_path)
    assert len(paths) == 4 and all(p.exists() for p in paths)
