"""Robust bundle adjustment over camera models, poses, rig and pattern points.

The cost is ``sum rho(|r|^2)`` over valid reprojection residuals
``r = pi_c(M_c T_i p_o) - d_io`` with the Huber function ``rho``. Residuals
whose point does not project into a camera's calibrated area are invalid and
simply drop out. Steps are accepted by comparing the two states only over
residuals valid in both.

Parameter updates are local: rotations are left-multiplied by ``exp(w)``,
generic-grid directions move in their tangent plane and are re-normalized,
everything else is additive.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import Pose, rotation_from_rotvec, skew, tangent_basis
from .lm import LMSettings, damped_solve
from .models.generic import CentralGenericModel, NoncentralGenericModel, _GridModel
from .models.parametric import ParametricModel

JACOBIAN_MODES = ("implicit", "finite-difference")
MAX_CHURN_REJECTIONS = 5
# damping floor for generic grids: keeps weakly observed grid regions from
# drifting along near-null directions of the normal equations
MIN_GRID_DAMPING = 1e-6


class InvalidProblemError(ValueError):
    """Inconsistent calibration problem (bad indices, runaway pattern points)."""


class DegenerateSpanError(ValueError):
    """Pattern points too few or too close together to fix the metric scale."""


# robust loss ---------------------------------------------------------------


def huber(s):
    """Huber cost on the squared residual norm ``s`` with threshold 1."""
    s = np.asarray(s, dtype=np.float64)
    return np.where(s <= 1.0, s, 2.0 * np.sqrt(np.maximum(s, 1.0)) - 1.0)


def huber_weight(s):
    """IRLS weight ``rho'(s)``."""
    s = np.asarray(s, dtype=np.float64)
    return np.where(s <= 1.0, 1.0, 1.0 / np.sqrt(np.maximum(s, 1.0)))


# direction updates ---------------------------------------------------------


@dataclass(frozen=True)
class DirectionParam:
    """A unit direction with a tangent frame for 2D local updates."""

    g: np.ndarray
    t1: np.ndarray
    t2: np.ndarray

    @classmethod
    def at(cls, g) -> DirectionParam:
        g = np.asarray(g, dtype=np.float64).reshape(3)
        t1, t2 = tangent_basis(g)
        return cls(g, t1[0], t2[0])


def apply_direction_update(param: DirectionParam, x1: float, x2: float) -> np.ndarray:
    v = param.g + x1 * param.t1 + x2 * param.t2
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ValueError("direction update collapsed to zero length")
    return v / n


def _update_directions(g: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """Vectorized ``apply_direction_update`` on (N, 3) directions and (N, 2) steps."""
    t1, t2 = tangent_basis(g)
    v = g + dx[:, :1] * t1 + dx[:, 1:2] * t2
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# problem -------------------------------------------------------------------


@dataclass
class Residual:
    value: np.ndarray | None
    valid: bool


@dataclass
class CalibrationProblem:
    """Cameras, rig transforms, image poses, pattern points and observations.

    ``poses[i]`` maps pattern (global) coordinates into the rig frame and
    ``rig[c]`` maps the rig frame into camera ``c``; ``rig[0]`` is fixed to the
    identity. Each observation row ``k`` says camera ``obs_camera[k]`` saw
    pattern point ``obs_feature[k]`` in image ``obs_image[k]`` at pixel
    ``obs_pixels[k]``.
    """

    cameras: list
    rig: list[Pose]
    poses: list[Pose]
    points: np.ndarray
    obs_camera: np.ndarray
    obs_image: np.ndarray
    obs_feature: np.ndarray
    obs_pixels: np.ndarray
    square_size: float = 1.0
    feature_ids: np.ndarray | None = None
    initial_points: np.ndarray | None = None
    hints: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        self.obs_camera = np.asarray(self.obs_camera, dtype=np.int64).reshape(-1)
        self.obs_image = np.asarray(self.obs_image, dtype=np.int64).reshape(-1)
        self.obs_feature = np.asarray(self.obs_feature, dtype=np.int64).reshape(-1)
        self.obs_pixels = np.array(self.obs_pixels, dtype=np.float64).reshape(-1, 2)
        if self.initial_points is None:
            self.initial_points = self.points.copy()
        if not self.rig:
            self.rig = [Pose.identity() for _ in self.cameras]

    @property
    def num_observations(self) -> int:
        return len(self.obs_pixels)

    def validate(self) -> None:
        m = self.num_observations
        if not (len(self.obs_camera) == len(self.obs_image) == len(self.obs_feature) == m):
            raise InvalidProblemError("observation arrays differ in length")
        if len(self.rig) != len(self.cameras):
            raise InvalidProblemError("one rig transform per camera is required")
        if m and (self.obs_camera.min() < 0 or self.obs_camera.max() >= len(self.cameras)):
            raise InvalidProblemError("observation references a missing camera")
        if m and (self.obs_image.min() < 0 or self.obs_image.max() >= len(self.poses)):
            raise InvalidProblemError("observation references a missing image")
        if m and (self.obs_feature.min() < 0 or self.obs_feature.max() >= len(self.points)):
            raise InvalidProblemError("observation references a missing pattern point")
        if len(self.cameras) == 1 and (not np.allclose(self.rig[0].R, np.eye(3)) or np.any(self.rig[0].t != 0)):
            raise InvalidProblemError("a single-camera problem needs an identity rig transform")
        drift = np.abs(self.points - self.initial_points).max(initial=0.0)
        if not np.isfinite(drift) or drift > 10 * self.square_size:
            raise InvalidProblemError("pattern points left their sanity bound")

    def copy(self) -> CalibrationProblem:
        return CalibrationProblem(
            cameras=list(self.cameras),
            rig=[p.copy() for p in self.rig],
            poses=[p.copy() for p in self.poses],
            points=self.points.copy(),
            obs_camera=self.obs_camera.copy(),
            obs_image=self.obs_image.copy(),
            obs_feature=self.obs_feature.copy(),
            obs_pixels=self.obs_pixels.copy(),
            square_size=self.square_size,
            feature_ids=None if self.feature_ids is None else self.feature_ids.copy(),
            initial_points=self.initial_points.copy(),
            hints=None if self.hints is None else self.hints.copy(),
        )

    def rig_points(self, rows=None) -> np.ndarray:
        """``T_i p_o`` for observation rows (all by default)."""
        rows = np.arange(self.num_observations) if rows is None else np.asarray(rows)
        R = np.stack([p.R for p in self.poses])
        t = np.stack([p.t for p in self.poses])
        img = self.obs_image[rows]
        return np.einsum("nij,nj->ni", R[img], self.points[self.obs_feature[rows]]) + t[img]

    def camera_points(self, rows=None) -> np.ndarray:
        """``M_c T_i p_o`` for observation rows (all by default)."""
        rows = np.arange(self.num_observations) if rows is None else np.asarray(rows)
        Xr = self.rig_points(rows)
        R = np.stack([p.R for p in self.rig])
        t = np.stack([p.t for p in self.rig])
        cam = self.obs_camera[rows]
        return np.einsum("nij,nj->ni", R[cam], Xr) + t[cam]


def _project(camera, X, hints):
    if isinstance(camera, _GridModel):
        return camera.project(X, init=hints)
    return camera.project(X)


def evaluate_residuals(problem: CalibrationProblem, use_hints: bool = True):
    """All residuals; returns ``(r (M, 2), valid (M,), projected px (M, 2))``."""
    m = problem.num_observations
    X = problem.camera_points()
    px = np.full((m, 2), np.nan)
    valid = np.zeros(m, dtype=bool)
    for c, camera in enumerate(problem.cameras):
        rows = np.flatnonzero(problem.obs_camera == c)
        if rows.size == 0:
            continue
        hints = problem.hints[rows] if (use_hints and problem.hints is not None) else None
        p, ok = _project(camera, X[rows], hints)
        px[rows] = p
        valid[rows] = ok
    r = px - problem.obs_pixels
    valid &= np.all(np.isfinite(r), axis=1)
    r[~valid] = 0.0
    return r, valid, px


def evaluate_residual(problem: CalibrationProblem, k: int) -> Residual:
    c = int(problem.obs_camera[k])
    X = problem.camera_points([k])
    hint = problem.hints[[k]] if problem.hints is not None else None
    px, ok = _project(problem.cameras[c], X, hint)
    if not ok[0]:
        return Residual(None, False)
    return Residual(px[0] - problem.obs_pixels[k], True)


@dataclass
class StateComparison:
    better: bool
    cost_a: float
    cost_b: float
    common: int


def compare_states(residuals_a, valid_a, residuals_b, valid_b) -> StateComparison:
    """Is state B cheaper than A over the residuals valid in both?"""
    common = np.asarray(valid_a, dtype=bool) & np.asarray(valid_b, dtype=bool)
    ra = np.asarray(residuals_a)[common]
    rb = np.asarray(residuals_b)[common]
    ca = float(huber(np.einsum("nc,nc->n", ra, ra)).sum())
    cb = float(huber(np.einsum("nc,nc->n", rb, rb)).sum())
    n = int(common.sum())
    return StateComparison(n > 0 and cb < ca, ca, cb, n)


def robust_cost(residuals, valid) -> float:
    r = np.asarray(residuals)[np.asarray(valid)]
    return float(huber(np.einsum("nc,nc->n", r, r)).sum())


# parameter layout ----------------------------------------------------------


def _params_per_control_point(camera) -> int:
    return 5 if isinstance(camera, NoncentralGenericModel) else 2


class _Layout:
    """Column offsets of every parameter block in the BA Jacobian."""

    def __init__(
        self, problem: CalibrationProblem, valid: np.ndarray, optimize_cameras: bool = True, optimize_points: bool = True
    ):
        self.cam_offset = []
        self.cam_map = []  # generic: per flat control parameter -> column or -1
        col = 0
        for c, camera in enumerate(problem.cameras):
            self.cam_offset.append(col)
            if not optimize_cameras:
                self.cam_map.append(None)
                continue
            if isinstance(camera, _GridModel):
                p = _params_per_control_point(camera)
                observed = np.zeros(camera.num_control_points, dtype=bool)
                rows = np.flatnonzero((problem.obs_camera == c) & valid)
                if rows.size:
                    it = camera.interpolate(problem.hints[rows])
                    observed[np.unique(it.idx[it.w != 0])] = True
                # unobserved control points are frozen; columns run along the
                # shorter grid axis first to keep the normal equations narrow-banded
                order = np.arange(camera.num_control_points).reshape(camera.grid_h, camera.grid_w)
                if camera.grid_h < camera.grid_w:
                    order = order.T
                order = order.ravel()
                order = order[observed[order]]
                cmap = np.full((camera.num_control_points, p), -1, dtype=np.int64)
                cmap[order] = col + np.arange(order.size * p).reshape(-1, p)
                col += order.size * p
                self.cam_map.append(cmap.ravel())
            else:
                self.cam_map.append(np.arange(camera.num_parameters) + col)
                col += camera.num_parameters
        self.camera_size = col
        self.rig_offset = {}
        for c in range(1, len(problem.cameras)):
            self.rig_offset[c] = col
            col += 6
        self.pose_offset = col
        col += 6 * len(problem.poses)
        self.point_offset = col
        self.optimize_points = optimize_points
        if optimize_points:
            col += 3 * len(problem.points)
        self.size = col


# Jacobian --------------------------------------------------------------------


def _fd_point_jacobian(camera, X, px):
    """Central differences of projection w.r.t. the camera-frame point."""
    h = 1e-4 * np.linalg.norm(X, axis=1)
    dX = np.zeros((len(X), 2, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        a, _ = _project(camera, X + h[:, None] * e, px)
        b, _ = _project(camera, X - h[:, None] * e, px)
        dX[:, :, k] = (a - b) / (2 * h[:, None])
    return dX


def build_jacobian(problem: CalibrationProblem, valid: np.ndarray, layout: _Layout, mode: str = "implicit"):
    """Sparse Jacobian of the (unweighted) residuals of valid rows.

    Returns ``(J, rows)`` where row ``2k + a`` of ``J`` is component ``a`` of
    observation ``rows[k]``.
    """
    if mode not in JACOBIAN_MODES:
        raise ValueError(f"unknown Jacobian mode {mode!r}")
    rows = np.flatnonzero(valid)
    n = rows.size
    Xr = problem.rig_points(rows)
    X = problem.camera_points(rows)
    px = problem.hints[rows]
    cam = problem.obs_camera[rows]
    img = problem.obs_image[rows]
    feat = problem.obs_feature[rows]
    Rf = np.stack([p.R for p in problem.poses])[img]
    Rc = np.stack([p.R for p in problem.rig])[cam]

    I_r, I_c, V = [], [], []

    def emit(local_rows, cols, vals):
        # local_rows (m,), cols (m, k), vals (m, 2, k)
        k = cols.shape[1]
        rr = np.repeat(2 * local_rows[:, None] + np.arange(2)[None, :], k, axis=1).reshape(len(local_rows), 2, k)
        cc = np.broadcast_to(cols[:, None, :], rr.shape)
        keep = cc >= 0
        I_r.append(rr[keep])
        I_c.append(cc[keep])
        V.append(vals[keep])

    dpdX = np.zeros((n, 2, 3))
    for c, camera in enumerate(problem.cameras):
        sel = np.flatnonzero(cam == c)
        if sel.size == 0:
            continue
        if isinstance(camera, _GridModel):
            dX, dT, idx = camera.projection_jacobians(X[sel], px[sel])
            if layout.cam_map[c] is not None:
                p = _params_per_control_point(camera)
                cols = layout.cam_map[c][(idx[:, :, None] * p + np.arange(p)).reshape(len(sel), -1)]
                emit(sel, cols, dT)
        else:
            dX, dP = camera.projection_jacobians(X[sel], px[sel])
            if layout.cam_map[c] is not None:
                cols = np.broadcast_to(layout.cam_map[c], (len(sel), camera.num_parameters))
                emit(sel, cols, dP)
        if mode == "finite-difference":
            dX = _fd_point_jacobian(camera, X[sel], px[sel])
        dpdX[sel] = dX

    # rig transforms (camera 0 fixed)
    for c, off in layout.rig_offset.items():
        sel = np.flatnonzero(cam == c)
        if sel.size == 0:
            continue
        RcXr = np.einsum("nij,nj->ni", Rc[sel], Xr[sel])
        dw = np.einsum("nij,njk->nik", dpdX[sel], -skew(RcXr))
        dt = dpdX[sel]
        emit(sel, np.tile(off + np.arange(6), (len(sel), 1)), np.concatenate([dw, dt], axis=2))

    A = np.einsum("nij,njk->nik", dpdX, Rc)  # d px / d rig-frame point
    RfP = np.einsum("nij,nj->ni", Rf, problem.points[feat])
    dw = np.einsum("nij,njk->nik", A, -skew(RfP))
    cols = layout.pose_offset + 6 * img[:, None] + np.arange(6)[None, :]
    emit(np.arange(n), cols, np.concatenate([dw, A], axis=2))

    if layout.optimize_points:
        dp = np.einsum("nij,njk->nik", A, Rf)
        cols = layout.point_offset + 3 * feat[:, None] + np.arange(3)[None, :]
        emit(np.arange(n), cols, dp)

    J = sp.csr_matrix(
        (np.concatenate(V), (np.concatenate(I_r), np.concatenate(I_c))), shape=(2 * n, layout.size)
    )
    return J, rows


def apply_update(problem: CalibrationProblem, layout: _Layout, dx: np.ndarray) -> CalibrationProblem:
    """New problem state after the local update ``dx``."""
    out = problem.copy()
    cams = []
    for c, camera in enumerate(problem.cameras):
        cmap = layout.cam_map[c]
        if cmap is None:
            cams.append(camera)
            continue
        if isinstance(camera, _GridModel):
            p = _params_per_control_point(camera)
            step = np.where(cmap >= 0, dx[np.maximum(cmap, 0)], 0.0).reshape(-1, p)
            g = camera.directions.reshape(-1, 3)
            moving = np.any(step[:, :2] != 0, axis=1)
            dirs = g.copy()
            dirs[moving] = _update_directions(g[moving], step[moving, :2])
            dirs = dirs.reshape(camera.directions.shape)
            if isinstance(camera, NoncentralGenericModel):
                pts = (camera.points.reshape(-1, 3) + step[:, 2:]).reshape(camera.points.shape)
                cams.append(camera.with_grids(dirs, pts))
            else:
                cams.append(camera.with_directions(dirs))
        else:
            cams.append(camera.with_params(camera.params + dx[cmap]))
    out.cameras = cams
    for c, off in layout.rig_offset.items():
        out.rig[c] = problem.rig[c].perturbed(dx[off : off + 3], dx[off + 3 : off + 6])
    d = dx[layout.pose_offset : layout.point_offset].reshape(-1, 6)
    out.poses = [
        Pose(rotation_from_rotvec(d[i, :3]) @ pose.R, pose.t + d[i, 3:]) for i, pose in enumerate(problem.poses)
    ]
    if layout.optimize_points:
        out.points = problem.points + dx[layout.point_offset :].reshape(-1, 3)
    return out


# optimizer -----------------------------------------------------------------


@dataclass
class BundleAdjustmentConfig:
    lm: LMSettings = field(default_factory=lambda: LMSettings(max_iterations=50))
    jacobian: str = "implicit"
    optimize_cameras: bool = True
    optimize_points: bool = True
    max_churn_rejections: int = MAX_CHURN_REJECTIONS


def bundle_adjust(problem: CalibrationProblem, config: BundleAdjustmentConfig | None = None):
    """Validity-aware robust LM; returns ``(optimized problem, report dict)``."""
    cfg = config or BundleAdjustmentConfig()
    s = cfg.lm
    start = time.perf_counter()
    problem.validate()
    state = problem.copy()
    r, valid, px = evaluate_residuals(state)
    state.hints = np.where(np.isfinite(px), px, state.hints if state.hints is not None else np.nan)
    layout = _Layout(state, valid, cfg.optimize_cameras, cfg.optimize_points)
    initial_cost = robust_cost(r, valid)
    history = [initial_cost]
    lam = s.initial_damping
    floor = MIN_GRID_DAMPING if cfg.optimize_cameras and any(isinstance(c, _GridModel) for c in state.cameras) else 0.0
    accepted = 0
    churn = 0
    iterations = 0
    status = "max-iterations"
    J = None
    while iterations < s.max_iterations:
        iterations += 1
        if valid.sum() == 0:
            status = "no-valid-residuals"
            break
        if J is None:
            J, rows = build_jacobian(state, valid, layout, cfg.jacobian)
            rv = r[rows]
            w = np.sqrt(huber_weight(np.einsum("nc,nc->n", rv, rv)))
            W = sp.diags(np.repeat(w, 2))
            Jw = W @ J
            rw = (rv * w[:, None]).ravel()
            JtJ = (Jw.T @ Jw).tocsc()
            g = np.asarray(Jw.T @ rw).ravel()
            if np.max(np.abs(g), initial=0.0) < 1e-15:
                status = "converged"
                break
        dx = damped_solve(JtJ, g, lam, n_band=layout.camera_size)
        cand = apply_update(state, layout, dx)
        r_new, valid_new, px_new = evaluate_residuals(cand)
        cmp = compare_states(r, valid, r_new, valid_new)
        if cmp.better:
            rel = (cmp.cost_a - cmp.cost_b) / max(cmp.cost_a, 1e-300)
            cand.hints = np.where(np.isfinite(px_new), px_new, state.hints)
            state, r, valid = cand, r_new, valid_new
            history.append(robust_cost(r, valid))
            accepted += 1
            churn = 0
            lam = max(lam * s.damping_decrease, s.min_damping, floor)
            J = None
            if rel < s.cost_tolerance or np.max(np.abs(dx)) < s.param_tolerance:
                status = "converged"
                break
        else:
            if np.max(np.abs(dx)) < s.param_tolerance:
                status = "converged"
                break
            if np.any(valid_new != valid):
                churn += 1
                if churn >= cfg.max_churn_rejections:
                    status = "validity-churn"
                    break
            else:
                churn = 0
            lam *= s.damping_increase
            if lam > s.max_damping:
                status = "converged" if accepted > 0 else "diverged"
                break
    state.validate()
    report = {
        "status": status,
        "converged": status in ("converged", "validity-churn"),
        "iterations": iterations,
        "accepted_steps": accepted,
        "initial_cost": initial_cost,
        "final_cost": robust_cost(r, valid),
        "cost_history": history,
        "valid_residuals": int(valid.sum()),
        "total_residuals": int(state.num_observations),
        "num_parameters": layout.size,
        "jacobian": cfg.jacobian,
        "seconds": time.perf_counter() - start,
    }
    return state, report


# metric scale ----------------------------------------------------------------


def adjacent_spacing(points: np.ndarray, feature_ids: np.ndarray) -> np.ndarray:
    """Distances between pattern points whose square indices differ by one."""
    lookup = {tuple(map(int, f)): k for k, f in enumerate(feature_ids)}
    dists = []
    for (i, j), k in lookup.items():
        for nb in ((i + 1, j), (i, j + 1)):
            m = lookup.get(nb)
            if m is not None:
                dists.append(np.linalg.norm(points[k] - points[m]))
    return np.asarray(dists)


def apply_metric_scale(problem: CalibrationProblem, physical_square_size: float):
    """Scale so the median adjacent-feature spacing equals ``physical_square_size``.

    Returns ``(scaled problem, scale factor)``.
    """
    if problem.feature_ids is None:
        raise DegenerateSpanError("pattern feature indices are required for metric scaling")
    d = adjacent_spacing(problem.points, problem.feature_ids)
    if d.size == 0 or np.median(d) < 1e-12:
        raise DegenerateSpanError("pattern points do not span two adjacent squares")
    scale = float(physical_square_size / np.median(d))
    out = problem.copy()
    out.points = problem.points * scale
    out.initial_points = problem.initial_points * scale
    out.square_size = problem.square_size * scale
    out.poses = [Pose(p.R, p.t * scale) for p in problem.poses]
    out.rig = [Pose(p.R, p.t * scale) for p in problem.rig]
    out.cameras = [
        c.with_grids(c.directions, c.points * scale) if isinstance(c, NoncentralGenericModel) else c
        for c in problem.cameras
    ]
    return out, scale


def is_generic(camera) -> bool:
    return isinstance(camera, (CentralGenericModel, NoncentralGenericModel))


def is_parametric(camera) -> bool:
    return isinstance(camera, ParametricModel)
