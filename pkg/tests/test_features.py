from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gencalib.features import (
    VARIANTS,
    DegenerateVarianceError,
    FeatureDetection,
    LocalHomography,
    affine_brightness_init,
    detect_features,
    local_homography,
    read_detections,
    refine_matching,
    refine_symmetry,
    symmetry_samples,
    write_detections,
)
from gencalib.geometry import Pose, fit_homography, rotation_from_rotvec
from gencalib.models.synthetic import PinholeCamera
from gencalib.pattern import StarPattern, render_synthetic


@given(
    f=st.floats(0.1, 5.0),
    b=st.floats(-1.0, 1.0),
    seed=st.integers(0, 2**31 - 1),
)
def test_affine_brightness_matches_normal_equations(f, b, seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(size=50)
    q = f * p + b + rng.normal(scale=0.05, size=50)
    A = np.column_stack([p, np.ones_like(p)])
    oracle = np.linalg.solve(A.T @ A, A.T @ q)
    got = affine_brightness_init(p, q)
    assert abs(got[0] - oracle[0]) <= 1e-10 and abs(got[1] - oracle[1]) <= 1e-10


def test_affine_brightness_rejects_constant_samples():
    with pytest.raises(DegenerateVarianceError):
        affine_brightness_init(np.full(10, 0.3), np.arange(10.0))
    with pytest.raises(ValueError):
        affine_brightness_init([1.0], [2.0])


@pytest.fixture(scope="module")
def scene():
    pat = StarPattern(segment_count=16, squares_x=7, squares_y=6, square_size=0.02, physical_square_size=0.02)
    cam = PinholeCamera(width=220, height=180, fx=420.0, fy=420.0, cx=109.5, cy=89.5)
    R = rotation_from_rotvec([0.25, -0.2, 0.1])
    pose = Pose(R, np.array([0.0, 0.0, 0.45]) - R @ np.array([0.07, 0.06, 0.0]))
    view = render_synthetic(pat, cam, pose, supersampling=4, blur_sigma=0.5, noise_sigma=0.005, rng=1)
    H = fit_homography(pat.feature_points(view.feature_indices), view.feature_positions)
    return pat, view, H


def _start(pat, view, H, k, offset):
    idx = tuple(int(v) for v in view.feature_indices[k])
    L = local_homography(pat, idx, H).translated(offset)
    return idx, L, view.feature_positions[k]


@pytest.mark.parametrize("variant", VARIANTS)
def test_symmetry_refinement_recovers_center(scene, variant):
    pat, view, H = scene
    for k, off in [(10, (0.8, -0.6)), (20, (-0.5, 0.9))]:
        idx, L, truth = _start(pat, view, H, k, off)
        _, pos = refine_symmetry(view.image, 21, L, variant=variant, pattern=pat, square_index=idx)
        assert np.linalg.norm(pos - truth) < 0.05


def test_symmetry_samples_mirror_inside_window(scene):
    pat, view, H = scene
    idx, L, _ = _start(pat, view, H, 12, (0, 0))
    s = symmetry_samples(L, 15, 500, np.random.default_rng(0), pat, idx)
    lo = np.round(L.position) - 7.5
    hi = np.round(L.position) + 7.5
    for sgn in (1, -1):
        p = L.apply(sgn * s)
        assert np.all((p >= lo) & (p <= hi))


def test_matching_refinement_corrects_offset(scene):
    pat, view, H = scene
    idx, L, truth = _start(pat, view, H, 15, (1.2, 0.7))
    m = refine_matching(view.image, pat, 21, L, idx)
    assert m.accepted
    assert m.f > 0
    assert np.linalg.norm(m.position - truth) < 0.3


def test_matching_rejects_inverted_contrast(scene):
    pat, view, H = scene
    idx, L, _ = _start(pat, view, H, 15, (0, 0))
    from gencalib.imaging import RasterImage

    m = refine_matching(RasterImage(1.0 - view.image.data), pat, 21, L, idx)
    assert not m.accepted


def test_detection_finds_features_accurately(scene):
    pat, view, _ = scene
    sp, si = view.seed_correspondences()
    dets = detect_features(view.image, pat, sp, si)
    truth = view.feature_lookup()
    assert len(dets) >= 0.9 * len(truth)
    errs = [np.linalg.norm(d.position - truth[d.square_index]) for d in dets]
    assert np.median(errs) < 0.03
    assert max(errs) < 0.2


def test_detection_with_degenerate_seeds_is_empty(scene):
    pat, view, _ = scene
    sp = np.array([[0.0, 0.0], [0.01, 0.0], [0.02, 0.0], [0.03, 0.0]])
    assert detect_features(view.image, pat, sp, sp * 100) == []
    assert detect_features(view.image, pat, sp[:3], sp[:3]) == []


def test_detections_csv_roundtrip(tmp_path):
    dets = {
        "b": [FeatureDetection((1, 2), np.array([10.25, 3.0000000001]))],
        "a": [FeatureDetection((0, 0), np.array([1 / 3, 2 / 3])), FeatureDetection((4, 1), np.array([5.0, 6.0]))],
    }
    write_detections(tmp_path / "d.csv", dets)
    back = read_detections(tmp_path / "d.csv")
    assert sorted(back) == ["a", "b"]
    for k in dets:
        for x, y in zip(dets[k], back[k]):
            assert x.square_index == y.square_index
            assert np.array_equal(x.position, y.position)


def test_local_homography_rejects_singular():
    with pytest.raises(ValueError):
        LocalHomography(np.zeros((3, 3)) + np.eye(3)[2:3].T @ np.eye(3)[2:3])
