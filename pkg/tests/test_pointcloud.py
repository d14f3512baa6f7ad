import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fakepcd.pointcloud import (
    AugmentPolicy,
    AugmentSpec,
    PointCloud,
    PointCloudError,
    PointCloudParseError,
    augment,
    augment_points,
    chamfer_distance,
    downsample,
    make_rng,
    read_point_cloud,
    write_point_cloud,
)
from fakepcd.simsource import default_sources, sample_cloud


def brute_chamfer(a, b):
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def test_read_xyz_literal(tmp_path):
    p = tmp_path / "two.xyz"
    p.write_text("0 0 0\n1 2 3\n")
    cloud = read_point_cloud(p)
    np.testing.assert_array_equal(cloud.points, [[0, 0, 0], [1, 2, 3]])


def test_empty_file_is_parse_error(tmp_path):
    p = tmp_path / "empty.xyz"
    p.write_text("")
    with pytest.raises(PointCloudParseError, match="no points"):
        read_point_cloud(p)


def test_read_hand_built_pcda(tmp_path):
    vals = np.arange(9, dtype="<f4") * 0.5
    p = tmp_path / "three.pcda"
    p.write_bytes(b"PCDA" + struct.pack("<I", 3) + vals.tobytes())
    cloud = read_point_cloud(p)
    np.testing.assert_array_equal(cloud.points, vals.reshape(3, 3).astype(np.float64))


def test_pcda_count_mismatch_reports_sizes(tmp_path):
    p = tmp_path / "bad.pcda"
    p.write_bytes(b"PCDA" + struct.pack("<I", 4) + np.zeros(9, dtype="<f4").tobytes())
    with pytest.raises(PointCloudParseError, match="count mismatch"):
        read_point_cloud(p)


def test_xyz_bad_line_reports_line_number(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("0 0 0\n1 2\n")
    with pytest.raises(PointCloudParseError, match="line 2"):
        read_point_cloud(p)


def test_pcda_round_trip_bitwise(tmp_path):
    pts = make_rng(3).normal(size=(2048, 3)).astype(np.float32).astype(np.float64)
    p = tmp_path / "rt.pcda"
    write_point_cloud(PointCloud(pts), p)
    back = read_point_cloud(p)
    assert back.points.tobytes() == pts.tobytes()


def test_xyz_round_trip_precision(tmp_path):
    pts = make_rng(4).uniform(-1, 1, size=(500, 3))
    p = tmp_path / "rt.xyz"
    write_point_cloud(PointCloud(pts), p, format="xyz")
    assert np.max(np.abs(read_point_cloud(p).points - pts)) <= 5e-7


def test_nan_cloud_refused(tmp_path):
    with pytest.raises(PointCloudError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    cloud = PointCloud(np.zeros((2, 3)))
    cloud.points[0, 0] = np.nan
    p = tmp_path / "nan.pcda"
    with pytest.raises(PointCloudError):
        write_point_cloud(cloud, p)
    assert not p.exists()


def test_downsample_subset():
    cloud = PointCloud(np.arange(15, dtype=float).reshape(5, 3))
    out = downsample(cloud, 3, seed=7)
    assert len(out) == 3
    rows = {tuple(r) for r in cloud.points}
    assert all(tuple(r) in rows for r in out.points)
    assert len({tuple(r) for r in out.points}) == 3


def test_downsample_identity_and_simulator_scale():
    cloud = PointCloud(np.arange(15, dtype=float).reshape(5, 3))
    assert downsample(cloud, 5, seed=1).points is cloud.points
    big = sample_cloud(default_sources()[0], "airplane", 15000, seed=5)
    assert len(downsample(big, 2048, seed=0)) == 2048


def test_chamfer_trivial_cases():
    x = make_rng(0).normal(size=(20, 3))
    assert chamfer_distance(x, x) == 0.0
    assert chamfer_distance(np.zeros((1, 3)), np.array([[1.0, 0, 0]])) == 2.0


def test_chamfer_matches_brute_force():
    rng = make_rng(1)
    a, b = rng.normal(size=(64, 3)), rng.normal(size=(64, 3))
    assert chamfer_distance(a, b) == pytest.approx(brute_chamfer(a, b), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 12), st.just(3)), elements=st.floats(-5, 5)),
    arrays(np.float64, st.tuples(st.integers(1, 12), st.just(3)), elements=st.floats(-5, 5)),
)
def test_chamfer_property_symmetric_and_matches_scan(a, b):
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), abs=1e-12)
    assert chamfer_distance(a, b) == pytest.approx(brute_chamfer(a, b), rel=1e-9, abs=1e-12)


def test_augment_identity():
    x = make_rng(2).normal(size=(30, 3))
    np.testing.assert_array_equal(augment_points(x, AugmentSpec()), x)


def test_rotation_quarter_turn_about_z():
    spec = AugmentSpec(rotate_axes=(False, False, True), angle_range=(math.pi / 2, math.pi / 2))
    out = augment_points(np.array([[1.0, 0.0, 0.0]]), spec)
    np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32), st.tuples(st.booleans(), st.booleans(), st.booleans()))
def test_rotation_preserves_pairwise_distances(seed, axes):
    x = make_rng(seed).normal(size=(16, 3))
    spec = AugmentSpec(rotate_axes=axes, angle_range=(0.0, 2 * math.pi), rng_seed=seed)
    y = augment_points(x, spec)
    dx = np.linalg.norm(x[:, None] - x[None], axis=2)
    dy = np.linalg.norm(y[:, None] - y[None], axis=2)
    np.testing.assert_allclose(dx, dy, atol=1e-9)


def test_augment_is_seeded_and_translation_exact():
    x = make_rng(5).normal(size=(10, 3))
    spec = AugmentSpec(translation=(1.0, -2.0, 0.5), jitter_sigma=0.01, rng_seed=9)
    np.testing.assert_array_equal(augment_points(x, spec), augment_points(x, spec))
    moved = augment(PointCloud(x), AugmentSpec(translation=(1.0, -2.0, 0.5)))
    np.testing.assert_allclose(moved.points - x, np.tile([1.0, -2.0, 0.5], (10, 1)), atol=1e-15)


def test_augment_spec_validation():
    with pytest.raises(PointCloudError):
        AugmentSpec(jitter_sigma=-1.0)
    with pytest.raises(PointCloudError):
        AugmentSpec(angle_range=(0.0, 7.0))


def test_policy_draw_within_bounds():
    pol = AugmentPolicy(0.05, 0.005, (False, False, True), (0.0, 0.13))
    rng = make_rng(0)
    for _ in range(50):
        spec = pol.draw(rng)
        assert all(abs(t) <= 0.05 for t in spec.translation)
        assert spec.angle_range == (0.0, 0.13)
