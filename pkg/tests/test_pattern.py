from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gencalib.geometry import Pose, rotation_from_rotvec
from gencalib.models.synthetic import PinholeCamera
from gencalib.pattern import (
    OutOfPatternError,
    StarPattern,
    default_pattern,
    load_pattern,
    load_sidecar,
    pattern_intensity,
    render_synthetic,
    save_pattern,
    save_sidecar,
)


@pytest.mark.parametrize("s", [3, 6, 10, 2])
def test_segment_count_must_be_multiple_of_four(s):
    with pytest.raises(ValueError):
        StarPattern(segment_count=s)


def test_checkerboard_for_four_segments():
    pat = StarPattern(segment_count=4, squares_x=4, squares_y=4)
    # quadrants around a square center alternate like a checkerboard
    c = pat.feature_point(1, 2)
    vals = [pattern_intensity(pat, c + d) for d in ([0.2, 0.2], [-0.2, 0.2], [-0.2, -0.2], [0.2, -0.2])]
    assert vals[0] == vals[2] and vals[1] == vals[3] and vals[0] != vals[1]


@given(
    s=st.sampled_from([4, 8, 12, 16, 24, 32]),
    i=st.integers(1, 6),
    j=st.integers(1, 4),
    dx=st.floats(-1.4, 1.4),
    dy=st.floats(-1.4, 1.4),
)
def test_point_symmetry_about_every_interior_feature(s, i, j, dx, dy):
    pat = StarPattern(segment_count=s, squares_x=8, squares_y=6)
    c = pat.feature_point(i, j)
    d = np.array([dx, dy])
    # skip points on segment or square boundaries where the value is ambiguous
    for p in (c + d, c - d):
        local = p / pat.square_size
        frac = local - np.floor(local)
        if np.any(np.abs(frac) < 1e-6) or np.any(np.abs(frac - 0.5) < 1e-6):
            return
        theta = np.arctan2(frac[1] - 0.5, frac[0] - 0.5) % (2 * np.pi)
        if abs(s * theta / (2 * np.pi) - round(s * theta / (2 * np.pi))) < 1e-6:
            return
    assert pattern_intensity(pat, c + d) == pattern_intensity(pat, c - d)


def test_intensity_counts_segments():
    pat = StarPattern(segment_count=16, squares_x=1, squares_y=1)
    c = pat.feature_point(0, 0)
    theta = (np.arange(16) + 0.5) * 2 * np.pi / 16
    vals = [pattern_intensity(pat, c + 0.3 * np.array([np.cos(t), np.sin(t)])) for t in theta]
    assert vals == [k % 2 for k in range(16)]


def test_outside_pattern_is_an_error():
    pat = StarPattern(squares_x=2, squares_y=2)
    with pytest.raises(OutOfPatternError):
        pattern_intensity(pat, (-0.1, 0.5))


def test_fiducial_excluded_from_features():
    pat = default_pattern(16, 0.01, 10, 8)
    idx = {tuple(t) for t in pat.feature_indices().tolist()}
    assert len(idx) == 10 * 8 - 4
    assert not (idx & pat.fiducial_region)


def test_pattern_file_roundtrip(tmp_path):
    pat = default_pattern(12, 0.02, 9, 7)
    save_pattern(pat, tmp_path / "p.json")
    assert load_pattern(tmp_path / "p.json") == pat


@pytest.fixture(scope="module")
def rendered():
    pat = StarPattern(segment_count=16, squares_x=6, squares_y=5, square_size=0.02, physical_square_size=0.02)
    cam = PinholeCamera(width=200, height=150, fx=400.0, fy=400.0, cx=99.5, cy=74.5)
    R = rotation_from_rotvec([0.15, -0.1, 0.05])
    pose = Pose(R, np.array([0.0, 0.0, 0.4]) - R @ np.array([0.06, 0.05, 0.0]))
    return render_synthetic(pat, cam, pose, supersampling=3)


def test_true_features_are_projections(rendered):
    cam, pose, pat = rendered.camera, rendered.pose, rendered.pattern
    for (i, j), (x, y) in rendered.true_features:
        X = pose.apply(np.append(pat.feature_point(i, j), 0.0)[None])[0]
        assert x == pytest.approx(cam.fx * X[0] / X[2] + cam.cx, abs=1e-9)
        assert y == pytest.approx(cam.fy * X[1] / X[2] + cam.cy, abs=1e-9)
    assert len(rendered.true_features) == 30


def test_render_matches_pattern_away_from_edges(rendered):
    # pixels well inside a segment render as pure black or white
    pat, pose, cam = rendered.pattern, rendered.pose, rendered.camera
    (i, j), (x, y) = rendered.true_features[7]
    R = pose.R.T
    d = np.array([(x + 4 - cam.cx) / cam.fx, (y + 1 - cam.cy) / cam.fy, 1.0])
    o = -R @ pose.t
    dd = R @ d
    hit = o + (-o[2] / dd[2]) * dd
    expected = pattern_intensity(pat, hit[:2])
    assert rendered.image.data[int(y + 1 + 0.5), int(x + 4 + 0.5)] == pytest.approx(expected, abs=0.35)


def test_render_is_deterministic_with_seed(rendered):
    a = render_synthetic(rendered.pattern, rendered.camera, rendered.pose, 2, 0.5, 0.01, rng=5)
    b = render_synthetic(rendered.pattern, rendered.camera, rendered.pose, 2, 0.5, 0.01, rng=5)
    assert np.array_equal(a.image.data, b.image.data)


def test_render_rejects_plane_through_center(rendered):
    pose = Pose(rotation_from_rotvec([np.pi / 2, 0, 0]), np.zeros(3))
    with pytest.raises(ValueError):
        render_synthetic(rendered.pattern, rendered.camera, pose)


def test_sidecar_roundtrip(tmp_path, rendered):
    save_sidecar(rendered, tmp_path / "v.json")
    side = load_sidecar(tmp_path / "v.json")
    assert np.allclose(side["feature_positions"], rendered.feature_positions)
    assert np.array_equal(side["feature_indices"], rendered.feature_indices)
    assert side["seed_pattern"].shape == (4, 2)
    assert np.allclose(side["pose"].R, rendered.pose.R)
