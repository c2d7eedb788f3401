from __future__ import annotations

import numpy as np
import pytest

from gencalib.features import FeatureDetection
from gencalib.geometry import Pose, fit_homography, rotation_from_rotvec
from gencalib.initialization import (
    DenseMatchMap,
    PerPixelDirections,
    TooFewCorrespondencesError,
    direction_residuals,
    estimate_focal,
    fit_grid_to_perpixel,
    initialize_calibration,
    interpolate_dense_matches,
    localize_image,
    select_triple,
)
from gencalib.models.fitting import compare_generic
from gencalib.models.generic import CalibratedArea
from gencalib.models.synthetic import PinholeCamera, WavyCamera
from gencalib.scenario import ScenarioConfig, sample_pose, scenario_pattern


def exact_detections(camera, pattern, pose):
    idx = pattern.feature_indices()
    px, ok = camera.project(pose.apply(np.column_stack([pattern.feature_points(idx), np.zeros(len(idx))])))
    inside = ok & (px[:, 0] >= 0) & (px[:, 1] >= 0) & (px[:, 0] <= camera.width - 1) & (px[:, 1] <= camera.height - 1)
    return [FeatureDetection(tuple(map(int, idx[k])), px[k]) for k in np.flatnonzero(inside)]


@pytest.fixture(scope="module")
def wavy_views():
    cfg = ScenarioConfig(views=12, seed=3)
    pattern = scenario_pattern(cfg)
    cam = WavyCamera()
    rng = np.random.default_rng(cfg.seed)
    poses = [sample_pose(cam, pattern, rng, cfg) for _ in range(cfg.views)]
    dets = {f"v{k:02d}": exact_detections(cam, pattern, p) for k, p in enumerate(poses)}
    return cam, pattern, dict(zip(dets, poses)), dets


def test_dense_matches_exact_under_pinhole(wavy_views):
    _, pattern, _, _ = wavy_views
    cam = PinholeCamera(width=320, height=240, fx=300.0, fy=300.0, cx=159.5, cy=119.5)
    pose = Pose(rotation_from_rotvec([0.1, -0.15, 0.0]), np.array([-0.2, -0.15, 0.6]))
    dense = interpolate_dense_matches(exact_detections(cam, pattern, pose), pattern, (320, 240))
    assert dense.count() > 1000
    # a pinhole maps the plane by a homography, so every filled pixel is exact
    gy, gx = np.nonzero(dense.defined)
    px = np.column_stack([gx, gy]).astype(float)
    _, d = cam._lines(px)
    X = pose.inverse().apply(d * 1.0)
    o = pose.inverse().t
    s = -o[2] / (X[:, 2] - o[2])
    hit = o + s[:, None] * (X - o)
    assert np.abs(dense.coords[gy, gx] - hit[:, :2]).max() < 1e-9


def test_select_triple_maximizes_overlap():
    def block(x0, x1):
        c = np.full((10, 10, 2), np.nan)
        c[:, x0:x1] = 0.0
        return DenseMatchMap(c)

    maps = [block(0, 5), block(3, 10), block(0, 6), block(0, 4), block(6, 10)]
    (a, b, c), score = select_triple(maps)
    assert (a, b, c) == (0, 2, 3) and score == 40


def test_estimate_focal_recovers_pinhole(wavy_views):
    _, pattern, poses, _ = wavy_views
    cam = PinholeCamera(width=640, height=480, fx=520.0, fy=520.0, cx=319.5, cy=239.5)
    homs, obs = [], []
    for pose in list(poses.values())[:3]:
        dets = exact_detections(cam, pattern, pose)
        pat = pattern.feature_points([d.square_index for d in dets])
        img = np.array([d.position for d in dets])
        homs.append(fit_homography(pat, img))
        obs.append((pat, img))
    assert estimate_focal(homs, obs, 640, 480) == pytest.approx(520.0, rel=1e-3)


def test_localize_image_recovers_pose(central_grid, wavy_views):
    _, pattern, poses, _ = wavy_views
    pose = next(iter(poses.values()))
    dets = exact_detections(central_grid, pattern, pose)
    pat = pattern.feature_points([d.square_index for d in dets])
    got = localize_image(central_grid, np.array([d.position for d in dets]), pat)
    assert np.allclose(got.R, pose.R, atol=1e-7) and np.allclose(got.t, pose.t, atol=1e-7)


def test_localize_image_needs_six_points(central_grid):
    with pytest.raises(TooFewCorrespondencesError):
        localize_image(central_grid, np.full((5, 2), 300.0), np.zeros((5, 2)))


def test_direction_residual_jacobian():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 3)) * 0.1
    o = rng.normal(size=(6, 3)) * 0.001
    d = rng.normal(size=(6, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pose = Pose(rotation_from_rotvec([0.2, 0.1, -0.3]), np.array([0.05, 0.0, 0.7]))
    _, J = direction_residuals(pose, X, o, d, jacobian=True)
    h = 1e-6
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        plus = Pose(rotation_from_rotvec(e[:3]) @ pose.R, pose.t + e[3:])
        minus = Pose(rotation_from_rotvec(-e[:3]) @ pose.R, pose.t - e[3:])
        fd = (direction_residuals(plus, X, o, d) - direction_residuals(minus, X, o, d)) / (2 * h)
        assert np.allclose(J[:, k], fd, atol=1e-7)


def test_grid_fit_reproduces_smooth_field():
    cam = WavyCamera()
    field = PerPixelDirections(640, 480)
    gy, gx = np.mgrid[0:480, 0:640]
    mask = (gx >= 30) & (gx <= 610) & (gy >= 30) & (gy <= 450)
    _, d = cam._lines(np.column_stack([gx[mask], gy[mask]]).astype(float))
    field.add_directions(mask, d / np.linalg.norm(d, axis=1, keepdims=True))
    area = CalibratedArea(30.0, 30.0, 610.0, 450.0)
    model = fit_grid_to_perpixel(field, 20.0, area)
    _, dev = compare_generic(model, cam, step=10)
    assert dev.median() < 0.005 and dev.max() < 0.1


def test_initialization_localizes_every_view(wavy_views):
    cam, pattern, poses, dets = wavy_views
    init = initialize_calibration(dets, pattern, 640, 480, px_per_cell=20.0)
    assert init.unlocalized == [] and set(init.poses) == set(dets)
    assert 0 <= init.model.area.min_x and init.model.area.max_x <= 639
    # a close enough start for bundle adjustment: a few pixels at most
    _, dev = compare_generic(init.model, cam, step=10)
    assert dev.median() < 2.0
