from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gencalib.ba import (
    BundleAdjustmentConfig,
    DegenerateSpanError,
    DirectionParam,
    InvalidProblemError,
    adjacent_spacing,
    apply_direction_update,
    apply_metric_scale,
    bundle_adjust,
    compare_states,
    evaluate_residual,
    evaluate_residuals,
    huber,
    huber_weight,
)
from gencalib.geometry import Pose, rotation_from_rotvec
from gencalib.lm import LMSettings
from gencalib.models.parametric import ThinPrismFisheye

from conftest import jacobian_column_errors, perturbed_state, similarity, synthetic_problem

TPF = ThinPrismFisheye([500, 502, 320, 240, 0.02, -0.01, 0.001, -0.0005, 0.001, 0.0, 0.0008, -0.0004], 640, 480)


def test_huber_values():
    assert huber(0.0) == 0.0
    assert huber(1.0) == 1.0
    assert huber(4.0) == 3.0
    assert np.array_equal(huber([0.25, 9.0]), [0.25, 5.0])


@given(st.floats(0.0, 1e6))
def test_huber_weight_is_derivative(s):
    h = 1e-6 * max(1.0, s)
    if abs(s - 1.0) < 2 * h:
        return
    lo = max(s - h, 0.0)
    fd = (huber(s + h) - huber(lo)) / (s + h - lo)
    assert huber_weight(s) == pytest.approx(float(fd), rel=1e-5, abs=1e-9)


@given(
    st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3),
    st.floats(-0.5, 0.5),
    st.floats(-0.5, 0.5),
)
def test_direction_update_stays_unit_and_tangent(g, x1, x2):
    g = np.array(g) / np.linalg.norm(g)
    p = DirectionParam.at(g)
    assert abs(p.t1 @ g) < 1e-12 and abs(p.t2 @ g) < 1e-12 and abs(p.t1 @ p.t2) < 1e-12
    d = apply_direction_update(p, x1, x2)
    assert np.linalg.norm(d) == pytest.approx(1.0, abs=1e-14)
    assert np.array_equal(apply_direction_update(p, 0.0, 0.0), g) or np.allclose(apply_direction_update(p, 0.0, 0.0), g, atol=1e-15)


def test_compare_states_uses_common_residuals():
    ra = np.array([[1.0, 0.0], [0.1, 0.0], [0.0, 0.0]])
    rb = np.array([[0.5, 0.0], [5.0, 0.0], [0.0, 0.0]])
    # B is worse on row 1, but row 1 is invalid in B, so only row 0 counts
    cmp = compare_states(ra, [True, True, False], rb, [True, False, True])
    assert cmp.better and cmp.common == 1
    assert cmp.cost_a == 1.0 and cmp.cost_b == 0.25
    assert not compare_states(ra, [False] * 3, rb, [True] * 3).better


@pytest.mark.parametrize("which", ["central", "noncentral", "tpf"])
@pytest.mark.parametrize("mode", ["implicit", "finite-difference"])
def test_jacobian_matches_finite_differences(central_grid, noncentral_grid, which, mode):
    model = {"central": central_grid, "noncentral": noncentral_grid, "tpf": TPF}[which]
    state = perturbed_state(synthetic_problem(model, n_images=2, seed=5, noise=0.2), seed=6)
    worst, off, checked = jacobian_column_errors(state, mode)
    assert checked > 0
    # the finite-difference mode differentiates numerically, so its tolerance is looser
    assert worst <= (1e-5 if mode == "implicit" else 1e-4)
    assert off < 1e-6


def test_similarity_gauge_central(central_grid):
    prob = synthetic_problem(central_grid, seed=1, noise=0.3)
    r0, v0, _ = evaluate_residuals(prob)
    moved = similarity(prob, 1.7, rotation_from_rotvec([0.3, -0.2, 0.5]), np.array([0.1, -0.3, 0.05]))
    r1, v1, _ = evaluate_residuals(moved)
    assert np.array_equal(v0, v1)
    assert np.abs(r1 - r0).max() <= 1e-10


def test_rotation_gauge_central(central_grid):
    prob = synthetic_problem(central_grid, seed=2, noise=0.3)
    r0, v0, _ = evaluate_residuals(prob)
    R = rotation_from_rotvec([0.05, 0.1, -0.08])
    moved = prob.copy()
    moved.poses = [Pose(R @ p.R, R @ p.t) for p in prob.poses]
    moved.cameras = [central_grid.rotated(R)]
    r1, v1, _ = evaluate_residuals(moved)
    assert np.array_equal(v0, v1)
    assert np.abs(r1 - r0).max() <= 1e-8


def test_translation_gauge_noncentral(noncentral_grid):
    prob = synthetic_problem(noncentral_grid, seed=3, noise=0.3)
    r0, v0, _ = evaluate_residuals(prob)
    tau = np.array([0.002, -0.001, 0.003])
    moved = prob.copy()
    moved.poses = [Pose(p.R, p.t + tau) for p in prob.poses]
    moved.cameras = [noncentral_grid.with_grids(noncentral_grid.directions, noncentral_grid.points + tau)]
    r1, v1, _ = evaluate_residuals(moved)
    assert np.array_equal(v0, v1)
    assert np.abs(r1 - r0).max() <= 1e-8


def test_bundle_adjustment_recovers_noise_free_data():
    truth = synthetic_problem(TPF, n_images=5, seed=4)
    start = perturbed_state(truth, seed=9, rot=0.005, trans=0.003, point=0.0)
    start.cameras = [TPF.with_params(TPF.params * np.r_[1.01, 0.99, 1.0, 1.0, np.ones(8)] + np.r_[0, 0, 2.0, -1.5, np.zeros(8)])]
    out, report = bundle_adjust(start, BundleAdjustmentConfig(lm=LMSettings(max_iterations=200)))
    assert report["final_cost"] < 1e-12 < report["initial_cost"]
    assert report["converged"]
    r, valid, _ = evaluate_residuals(out)
    assert valid.all() and np.abs(r).max() < 1e-6


def test_bundle_adjustment_generic_cost_decreases(central_grid):
    truth = synthetic_problem(central_grid, n_images=4, seed=8, noise=0.1)
    start = perturbed_state(truth, seed=10)
    out, report = bundle_adjust(start)
    hist = report["cost_history"]
    assert all(b < a for a, b in zip(hist, hist[1:]))
    assert report["final_cost"] < 0.1 * report["initial_cost"]


def test_bundle_adjustment_is_robust_to_an_outlier():
    prob = synthetic_problem(TPF, n_images=8, seed=11)
    prob.obs_pixels[7] += [40.0, -25.0]
    out, _ = bundle_adjust(prob, BundleAdjustmentConfig(lm=LMSettings(max_iterations=100)))
    r, _, _ = evaluate_residuals(out)
    n = np.linalg.norm(r, axis=1)
    assert n[7] > 30.0
    assert np.median(np.delete(n, 7)) < 0.05


def test_fixed_camera_and_points():
    prob = synthetic_problem(TPF, n_images=3, seed=12)
    start = perturbed_state(prob, seed=13, point=0.0)
    out, _ = bundle_adjust(start, BundleAdjustmentConfig(optimize_cameras=False, optimize_points=False))
    assert out.cameras[0] is start.cameras[0]
    assert np.array_equal(out.points, start.points)
    for a, b in zip(out.poses, prob.poses):
        assert np.allclose(a.t, b.t, atol=1e-8)


def test_single_residual_matches_batch(central_grid):
    prob = synthetic_problem(central_grid, seed=14, noise=0.2)
    r, valid, _ = evaluate_residuals(prob)
    one = evaluate_residual(prob, 3)
    assert one.valid and np.allclose(one.value, r[3], atol=1e-9)


def test_validate_rejects_bad_indices(central_grid):
    prob = synthetic_problem(central_grid, seed=0)
    prob.obs_feature[0] = len(prob.points)
    with pytest.raises(InvalidProblemError):
        prob.validate()
    prob = synthetic_problem(central_grid, seed=0)
    prob.points[0] += 100.0
    with pytest.raises(InvalidProblemError):
        prob.validate()


def test_metric_scale(central_grid):
    prob = synthetic_problem(central_grid, seed=15)
    half = similarity(prob, 0.5, np.eye(3), np.zeros(3))
    out, scale = apply_metric_scale(half, 0.05)
    assert scale == pytest.approx(2.0, rel=1e-12)
    assert np.median(adjacent_spacing(out.points, out.feature_ids)) == pytest.approx(0.05, rel=1e-12)
    r0, _, _ = evaluate_residuals(prob)
    r1, _, _ = evaluate_residuals(out)
    assert np.abs(r1 - r0).max() < 1e-9


def test_metric_scale_needs_adjacent_points(central_grid):
    prob = synthetic_problem(central_grid, seed=16)
    prob.feature_ids = np.array([[2 * k, 0] for k in range(len(prob.points))])
    with pytest.raises(DegenerateSpanError):
        apply_metric_scale(prob, 0.05)
