from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gencalib.ba import CalibrationProblem
from gencalib.geometry import Pose, rotation_from_rotvec
from gencalib.models.generic import CalibratedArea, CentralGenericModel, NoncentralGenericModel
from gencalib.models.synthetic import NoncentralWavyCamera, PinholeCamera, WavyCamera

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def grid_from_camera(camera, area: CalibratedArea, grid_w: int, grid_h: int, noncentral: bool = False):
    """Generic model whose control values are sampled from ``camera`` at the control-point pixels."""
    template = CentralGenericModel(area, np.tile([0.0, 0.0, 1.0], (grid_h, grid_w, 1)), camera.width, camera.height)
    cpp = template.control_point_pixels().reshape(-1, 2)
    origins, dirs, _ = camera.unproject_lines(cpp)
    dirs = dirs.reshape(grid_h, grid_w, 3)
    if noncentral:
        return NoncentralGenericModel(area, dirs, origins.reshape(grid_h, grid_w, 3), camera.width, camera.height)
    return CentralGenericModel(area, dirs, camera.width, camera.height)


@pytest.fixture(scope="session")
def pinhole():
    return PinholeCamera(width=160, height=120, fx=150.0, fy=150.0, cx=79.5, cy=59.5)


@pytest.fixture(scope="session")
def wavy():
    return WavyCamera()


@pytest.fixture(scope="session")
def small_area():
    return CalibratedArea(5.0, 5.0, 154.0, 114.0)


@pytest.fixture(scope="session")
def central_grid(wavy):
    area = CalibratedArea(20.0, 20.0, 619.0, 459.0)
    return grid_from_camera(wavy, area, 18, 14)


@pytest.fixture(scope="session")
def noncentral_grid():
    cam = NoncentralWavyCamera()
    area = CalibratedArea(20.0, 20.0, 619.0, 459.0)
    return grid_from_camera(cam, area, 18, 14, noncentral=True)


def planar_grid_points(nx: int = 6, ny: int = 5, spacing: float = 0.05) -> np.ndarray:
    gy, gx = np.mgrid[0:ny, 0:nx]
    return np.column_stack([gx.ravel() * spacing, gy.ravel() * spacing, np.zeros(nx * ny)])


def synthetic_problem(model, n_images: int = 4, seed: int = 0, noise: float = 0.0, nx: int = 6, ny: int = 5):
    """Single-camera problem: a planar point grid seen by ``model`` from ``n_images`` poses."""
    rng = np.random.default_rng(seed)
    pts = planar_grid_points(nx, ny)
    center = pts.mean(axis=0)
    poses, img, feat, pix = [], [], [], []
    k = 0
    while len(poses) < n_images:
        R = rotation_from_rotvec(rng.normal(scale=0.25, size=3))
        aim = np.array([rng.uniform(-0.08, 0.08), rng.uniform(-0.06, 0.06), rng.uniform(0.5, 0.7)])
        pose = Pose(R, aim - R @ center)
        px, ok = model.project(pose.apply(pts))
        if ok.sum() < 0.8 * len(pts):
            continue
        for f in np.flatnonzero(ok):
            img.append(k)
            feat.append(f)
            pix.append(px[f] + rng.normal(scale=noise, size=2))
        poses.append(pose)
        k += 1
    fids = np.array([[i % nx, i // nx] for i in range(len(pts))])
    return CalibrationProblem(
        cameras=[model],
        rig=[Pose.identity()],
        poses=poses,
        points=pts,
        obs_camera=np.zeros(len(img), dtype=np.int64),
        obs_image=np.array(img),
        obs_feature=np.array(feat),
        obs_pixels=np.array(pix),
        square_size=0.05,
        feature_ids=fids,
    )


def perturbed_state(problem, seed: int, rot: float = 0.01, trans: float = 0.005, point: float = 0.001):
    """Copy of ``problem`` with randomly disturbed poses and pattern points."""
    rng = np.random.default_rng(seed)
    out = problem.copy()
    out.poses = [Pose(rotation_from_rotvec(rng.normal(scale=rot, size=3)) @ p.R, p.t + rng.normal(scale=trans, size=3)) for p in problem.poses]
    out.points = problem.points + rng.normal(scale=point, size=problem.points.shape)
    out.hints = None
    return out


def jacobian_column_errors(problem, mode: str = "implicit", h: float = 1e-3, min_norm: float = 1e-4):
    """Compare BA Jacobian columns with 5-point central differences of the residuals.

    Returns ``(max relative error over columns, max |FD| outside each column's
    sparsity pattern, number of columns compared)``. Columns whose finite
    difference norm is below ``min_norm`` px per unit parameter are below the
    resolution of the difference quotient (residual round-off is ~1e-13 px)
    and are only checked through the off-pattern bound.
    """
    from gencalib import ba

    p = problem.copy()
    _, valid, px = ba.evaluate_residuals(p)
    p.hints = px
    layout = ba._Layout(p, valid)
    J, rows = ba.build_jacobian(p, valid, layout, mode)
    J = J.toarray()

    def res(t, c):
        dx = np.zeros(J.shape[1])
        dx[c] = t
        return ba.evaluate_residuals(ba.apply_update(p, layout, dx))[0][rows].ravel()

    worst, off, checked = 0.0, 0.0, 0
    for c in range(J.shape[1]):
        fd = (-res(2 * h, c) + 8 * res(h, c) - 8 * res(-h, c) + res(-2 * h, c)) / (12 * h)
        support = J[:, c] != 0
        off = max(off, float(np.abs(fd[~support]).max(initial=0.0)))
        norm = np.linalg.norm(fd[support])
        if norm >= min_norm:
            worst = max(worst, float(np.linalg.norm(J[support, c] - fd[support]) / norm))
            checked += 1
    return worst, off, checked


def pose_search_center_errors(model_gt, model_test, n_points=15, depth_range=(1.5, 2.5), trials=100, seed=0):
    """Independent pose-bias oracle.

    Draws the same random observations as the experiment, then searches the
    pose with scipy's trust-region least squares on the true angles between
    observed directions and pose-transformed points (rotation vector and
    camera center as unknowns). Returns the camera-center errors.
    """
    from scipy.optimize import least_squares
    from scipy.spatial.transform import Rotation

    from gencalib.evaluation import sample_pose_bias_points

    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(trials):
        px, X, ok = sample_pose_bias_points(model_gt, model_gt.area, n_points, depth_range, rng)
        px, X = px[ok], X[ok]
        o, d, v = model_test.unproject_lines(px)
        o, d, X = o[v], d[v], X[v]

        def angles(x):
            R = Rotation.from_rotvec(x[:3]).as_matrix()
            # x[3:] is the camera center in pattern coordinates
            v = (X - x[3:]) @ R.T - o
            cross = np.linalg.norm(np.cross(v, d), axis=1)
            return np.arctan2(cross, np.einsum("nc,nc->n", v, d))

        # start away from the true pose (identity at the origin)
        x0 = np.array([0.01, -0.01, 0.005, 0.02, 0.01, -0.02])
        sol = least_squares(angles, x0, jac="3-point", xtol=1e-15, ftol=1e-15, gtol=1e-15, x_scale="jac")
        errors.append(np.linalg.norm(sol.x[3:]))
    return np.asarray(errors)


def similarity(problem, s, R, t):
    """Apply p -> s (R p + t) to pattern points and the matching change to poses."""
    out = problem.copy()
    out.points = s * (problem.points @ R.T + t)
    out.initial_points = out.points.copy()
    out.poses = [Pose(p.R @ R.T, s * p.t - s * (p.R @ R.T @ t)) for p in problem.poses]
    return out
