"""Central and non-central generic camera models on B-spline control grids.

The control grid is aligned to the calibrated area and extends one cell beyond
it on every side. Pixel ``x`` maps to the grid parameter

    u = 1 + (x - area.min_x) / (area.max_x - area.min_x) * (grid_w - 3)

(likewise for ``y``/``v``), so the area corners land on the inner knot range
``[1, grid_w - 2]`` and every pixel inside the area has a full 4x4 support.

Un-projection interpolates the stored unit directions as 3D points and
re-normalizes. Projection has no closed form; it runs a small vectorized
Levenberg-Marquardt over pixel positions, clamped to the calibrated area.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..geometry import tangent_basis
from . import bspline

# squared chordal mismatch below which a projection is accepted (~1e-5 rad)
PROJECTION_THRESHOLD = 1e-10
# projections where the local pixel-to-direction map is this close to a fold are rejected
MIN_EIGENVALUE_RATIO = 1e-6


class ProjectionError(ValueError):
    """The point has no valid projection inside the calibrated area."""


@dataclass(frozen=True)
class CalibratedArea:
    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self):
        if not (self.min_x < self.max_x and self.min_y < self.max_y):
            raise ValueError("calibrated area must have min < max on both axes")

    @classmethod
    def bounding(cls, pixels, margin: float = 0.0, width: int | None = None, height: int | None = None) -> CalibratedArea:
        """Bounding box of ``pixels`` grown by ``margin``, clipped to the image if its size is given."""
        p = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        lo = p.min(axis=0) - margin
        hi = p.max(axis=0) + margin
        if width is not None and height is not None:
            lo = np.maximum(lo, 0.0)
            hi = np.minimum(hi, [width - 1.0, height - 1.0])
        return cls(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

    @property
    def size(self) -> tuple[float, float]:
        return self.max_x - self.min_x, self.max_y - self.min_y

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.min_x + self.max_x) / 2, (self.min_y + self.max_y) / 2])

    def contains(self, px) -> np.ndarray:
        px = np.asarray(px, dtype=np.float64)
        return (
            (px[..., 0] >= self.min_x)
            & (px[..., 0] <= self.max_x)
            & (px[..., 1] >= self.min_y)
            & (px[..., 1] <= self.max_y)
        )

    def clip(self, px) -> np.ndarray:
        px = np.asarray(px, dtype=np.float64)
        return np.stack(
            [np.clip(px[..., 0], self.min_x, self.max_x), np.clip(px[..., 1], self.min_y, self.max_y)],
            axis=-1,
        )

    def intersect(self, other: CalibratedArea) -> CalibratedArea:
        return CalibratedArea(
            max(self.min_x, other.min_x),
            max(self.min_y, other.min_y),
            min(self.max_x, other.max_x),
            min(self.max_y, other.max_y),
        )

    def pixel_grid(self, step: float) -> np.ndarray:
        """Regular (N, 2) pixel sample grid covering the area."""
        xs = np.arange(self.min_x, self.max_x + 1e-9, step)
        ys = np.arange(self.min_y, self.max_y + 1e-9, step)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])

    def to_dict(self) -> dict:
        return {"min_x": self.min_x, "min_y": self.min_y, "max_x": self.max_x, "max_y": self.max_y}

    @classmethod
    def from_dict(cls, d: dict) -> CalibratedArea:
        return cls(float(d["min_x"]), float(d["min_y"]), float(d["max_x"]), float(d["max_y"]))


def grid_size_for_resolution(area: CalibratedArea, px_per_cell: float) -> tuple[int, int]:
    """Control-point counts (w, h) giving cells of at most ``px_per_cell`` pixels."""
    w, h = area.size
    return int(np.ceil(w / px_per_cell)) + 3, int(np.ceil(h / px_per_cell)) + 3


class Interpolation(NamedTuple):
    idx: np.ndarray  # (N, 16) flat control indices
    w: np.ndarray  # (N, 16) weights
    wx: np.ndarray | None  # (N, 16) d w / d pixel x
    wy: np.ndarray | None
    raw: np.ndarray  # (N, 3) un-normalized interpolated direction
    norm: np.ndarray  # (N,) |raw|
    dirs: np.ndarray  # (N, 3) unit directions
    points: np.ndarray | None  # (N, 3) interpolated line points (non-central)
    valid: np.ndarray


def _solve2(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, bb, c, d = A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1]
    det = a * d - bb * c
    det = np.where(np.abs(det) < 1e-300, 1e-300, det)
    return np.column_stack([(d * b[:, 0] - bb * b[:, 1]) / det, (a * b[:, 1] - c * b[:, 0]) / det])


def _well_conditioned(J: np.ndarray) -> np.ndarray:
    """True where the (N, 3, 2) pixel Jacobian of the mismatch is not near a fold."""
    A = np.einsum("nci,ncj->nij", J, J)
    tr = A[:, 0, 0] + A[:, 1, 1]
    det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    # det / tr^2 ~ lambda_min / lambda_max for ill-conditioned A
    return det > MIN_EIGENVALUE_RATIO * tr * tr


class _GridModel:
    kind = "generic"
    noncentral = False

    def __init__(self, area: CalibratedArea, directions, width: int | None = None, height: int | None = None):
        d = np.array(directions, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 3:
            raise ValueError("directions must have shape (grid_h, grid_w, 3)")
        if d.shape[0] < 4 or d.shape[1] < 4:
            raise ValueError("control grid must be at least 4x4")
        norms = np.linalg.norm(d, axis=2, keepdims=True)
        if np.any(norms < 1e-12) or not np.all(np.isfinite(d)):
            raise ValueError("directions must be finite and non-zero")
        self.area = area
        # leave already-unit vectors untouched so saved models reload bit-exactly
        self.directions = np.where(np.abs(norms - 1.0) > 1e-12, d / norms, d)
        self.directions.setflags(write=False)
        self.width = int(width) if width is not None else int(np.ceil(area.max_x)) + 1
        self.height = int(height) if height is not None else int(np.ceil(area.max_y)) + 1

    @property
    def grid_w(self) -> int:
        return self.directions.shape[1]

    @property
    def grid_h(self) -> int:
        return self.directions.shape[0]

    @property
    def num_control_points(self) -> int:
        return self.grid_w * self.grid_h

    def grid_scale(self) -> tuple[float, float]:
        w, h = self.area.size
        return (self.grid_w - 3) / w, (self.grid_h - 3) / h

    def pixel_to_grid(self, px) -> tuple[np.ndarray, np.ndarray]:
        px = np.asarray(px, dtype=np.float64)
        sx, sy = self.grid_scale()
        return 1.0 + (px[..., 0] - self.area.min_x) * sx, 1.0 + (px[..., 1] - self.area.min_y) * sy

    def grid_to_pixel(self, u, v) -> np.ndarray:
        sx, sy = self.grid_scale()
        return np.stack([self.area.min_x + (np.asarray(u) - 1) / sx, self.area.min_y + (np.asarray(v) - 1) / sy], -1)

    def control_point_pixels(self) -> np.ndarray:
        """Pixel location (possibly outside the area) of every control point, (h, w, 2)."""
        gv, gu = np.meshgrid(np.arange(self.grid_h), np.arange(self.grid_w), indexing="ij")
        return self.grid_to_pixel(gu.astype(float), gv.astype(float))

    def interpolate(self, px, derivatives: bool = False) -> Interpolation:
        px = np.atleast_2d(np.asarray(px, dtype=np.float64))
        valid = self.area.contains(px)
        u, v = self.pixel_to_grid(self.area.clip(px))
        res = bspline.surface_weights(u, v, self.grid_w, self.grid_h, derivatives)
        idx, w = res[0], res[1]
        wx = wy = None
        if derivatives:
            sx, sy = self.grid_scale()
            wx, wy = res[2] * sx, res[3] * sy
        flat = self.directions.reshape(-1, 3)
        raw = np.einsum("nk,nkc->nc", w, flat[idx])
        norm = np.linalg.norm(raw, axis=1)
        dirs = raw / norm[:, None]
        points = None
        if self.noncentral:
            points = np.einsum("nk,nkc->nc", w, self.points.reshape(-1, 3)[idx])
        return Interpolation(idx, w, wx, wy, raw, norm, dirs, points, valid)

    def _dir_pixel_jacobian(self, it: Interpolation) -> np.ndarray:
        """d dirs / d px, shape (N, 3, 2)."""
        flat = self.directions.reshape(-1, 3)
        g = flat[it.idx]
        dS = np.stack([np.einsum("nk,nkc->nc", it.wx, g), np.einsum("nk,nkc->nc", it.wy, g)], axis=2)
        d = it.dirs
        proj = dS - d[:, :, None] * np.einsum("nc,nck->nk", d, dS)[:, None, :]
        return proj / it.norm[:, None, None]

    def unproject_lines(self, px):
        """Observation lines ``(origins, unit directions, valid)`` for pixels."""
        it = self.interpolate(px)
        origins = it.points if self.noncentral else np.zeros_like(it.dirs)
        return origins, it.dirs, it.valid

    def direction_lut(self, width: int | None = None, height: int | None = None) -> np.ndarray:
        """Dense (H, W, 3) float32 direction table; NaN outside the area."""
        width = width or self.width
        height = height or self.height
        gy, gx = np.mgrid[0:height, 0:width]
        px = np.column_stack([gx.ravel(), gy.ravel()]).astype(np.float64)
        _, dirs, ok = self.unproject_lines(px)
        dirs = np.where(ok[:, None], dirs, np.nan)
        return dirs.reshape(height, width, 3).astype(np.float32)

    # projection ------------------------------------------------------------

    def _projection_residual(self, X, px, derivatives):
        raise NotImplementedError

    def project(self, points, init=None, max_iterations: int = 100, threshold: float = PROJECTION_THRESHOLD):
        """Project camera-frame points to pixels; returns ``(px, valid)``.

        ``init`` optionally provides per-point starting pixels (e.g. the
        result of a previous projection of a nearby point).
        """
        X = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(X)
        px = np.tile(self.area.center, (n, 1))
        if init is not None:
            init = np.asarray(init, dtype=np.float64).reshape(n, 2)
            ok = np.all(np.isfinite(init), axis=1)
            px[ok] = self.area.clip(init[ok])
        finite = np.all(np.isfinite(X), axis=1) & (np.linalg.norm(X, axis=1) > 0)
        X = np.where(finite[:, None], X, 1.0)
        e, J = self._projection_residual(X, px, True)
        cost = np.einsum("nc,nc->n", e, e)
        lam = np.full(n, 1e-4)
        active = np.ones(n, dtype=bool)
        for _ in range(max_iterations):
            a = np.flatnonzero(active)
            if a.size == 0:
                break
            Ja = J[a]
            A = np.einsum("nci,ncj->nij", Ja, Ja)
            g = np.einsum("nci,nc->ni", Ja, e[a])
            diag = np.stack([A[:, 0, 0], A[:, 1, 1]], axis=1)
            diag = np.maximum(diag, 1e-30)
            Ad = A.copy()
            Ad[:, 0, 0] += lam[a] * diag[:, 0]
            Ad[:, 1, 1] += lam[a] * diag[:, 1]
            step = -_solve2(Ad, g)
            cand = self.area.clip(px[a] + step)
            e_new, J_new = self._projection_residual(X[a], cand, True)
            c_new = np.einsum("nc,nc->n", e_new, e_new)
            better = c_new < cost[a]
            moved = np.max(np.abs(cand - px[a]), axis=1)
            acc = a[better]
            px[acc] = cand[better]
            e[acc] = e_new[better]
            J[acc] = J_new[better]
            cost[acc] = c_new[better]
            lam[acc] = np.maximum(lam[acc] * 0.1, 1e-15)
            rej = a[~better]
            lam[rej] *= 10.0
            done = np.zeros(a.size, dtype=bool)
            done |= better & (moved < 1e-10)
            done |= ~better & ((moved < 1e-12) | (lam[a] > 1e10))
            done |= cost[a] < 1e-30
            active[a[done]] = False
        valid = finite & (cost < threshold) & _well_conditioned(J)
        return px, valid

    def _parameter_residual_jacobian(self, X, it: Interpolation):
        """d e / d (local control parameters), shape (N, 3, 16 * p)."""
        raise NotImplementedError

    def _point_residual_jacobian(self, X, it: Interpolation):
        raise NotImplementedError

    def projection_jacobians(self, points, px):
        """Derivatives of converged projections by implicit differentiation.

        At a projection ``px`` of ``X`` the mismatch ``e(px, X, theta)`` is
        stationary in ``px``, so ``d px = -(Jp^T Jp)^-1 Jp^T de``. Returns
        ``(dpx_dX (N, 2, 3), dpx_dtheta (N, 2, 16 * p), idx (N, 16))`` where
        ``theta`` are the local tangent updates of the 16 supporting control
        points (``p`` = 2 central, 5 non-central) in the order of ``idx``.
        """
        X = np.atleast_2d(np.asarray(points, dtype=np.float64))
        px = np.atleast_2d(np.asarray(px, dtype=np.float64))
        it = self.interpolate(px, derivatives=True)
        _, Jp = self._projection_residual(X, px, True)
        A = np.einsum("nci,ncj->nij", Jp, Jp)
        det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
        det = np.where(np.abs(det) < 1e-300, 1e-300, det)
        Ainv = np.empty_like(A)
        Ainv[:, 0, 0] = A[:, 1, 1] / det
        Ainv[:, 1, 1] = A[:, 0, 0] / det
        Ainv[:, 0, 1] = -A[:, 0, 1] / det
        Ainv[:, 1, 0] = -A[:, 1, 0] / det
        G = -np.einsum("nij,nkj->nik", Ainv, Jp)  # (N, 2, 3)
        dX = np.einsum("nik,nkj->nij", G, self._point_residual_jacobian(X, it))
        dT = np.einsum("nik,nkj->nij", G, self._parameter_residual_jacobian(X, it))
        return dX, dT, it.idx

    def _direction_blocks(self, it: Interpolation) -> np.ndarray:
        """d dirs / d (tangent updates of each stencil direction), (N, 3, 16, 2)."""
        g = self.directions.reshape(-1, 3)
        t1, t2 = tangent_basis(g)
        T = np.stack([t1, t2], axis=2)[it.idx]  # (N, 16, 3, 2)
        d = it.dirs
        P = (np.eye(3)[None] - d[:, :, None] * d[:, None, :]) / it.norm[:, None, None]
        return np.einsum("nij,nkjl->nikl", P, T) * it.w[:, None, :, None]

    def project_one(self, point, init=None) -> np.ndarray:
        px, ok = self.project(np.asarray(point, dtype=np.float64).reshape(1, 3), init=None if init is None else [init])
        if not ok[0]:
            raise ProjectionError(f"point {point} does not project into the calibrated area")
        return px[0]


class CentralGenericModel(_GridModel):
    """Unit observation directions stored on the control grid."""

    kind = "central-generic"

    @property
    def num_parameters(self) -> int:
        return 2 * self.num_control_points

    def unproject(self, px):
        """Unit directions for pixels; returns ``(dirs, valid)``."""
        it = self.interpolate(px)
        return it.dirs, it.valid

    def unproject_one(self, px) -> np.ndarray:
        dirs, ok = self.unproject(np.asarray(px, dtype=np.float64).reshape(1, 2))
        if not ok[0]:
            raise ProjectionError(f"pixel {px} outside the calibrated area")
        return dirs[0]

    def _projection_residual(self, X, px, derivatives):
        it = self.interpolate(px, derivatives)
        target = X / np.linalg.norm(X, axis=1, keepdims=True)
        e = it.dirs - target
        return e, self._dir_pixel_jacobian(it)

    def _point_residual_jacobian(self, X, it):
        n = np.linalg.norm(X, axis=1)
        m = X / n[:, None]
        return -(np.eye(3)[None] - m[:, :, None] * m[:, None, :]) / n[:, None, None]

    def _parameter_residual_jacobian(self, X, it):
        B = self._direction_blocks(it)
        return B.reshape(len(X), 3, 32)

    def with_directions(self, directions) -> CentralGenericModel:
        return CentralGenericModel(self.area, directions, self.width, self.height)

    def to_noncentral(self) -> NoncentralGenericModel:
        return NoncentralGenericModel(
            self.area, self.directions, np.zeros_like(self.directions), self.width, self.height
        )

    def rotated(self, R) -> CentralGenericModel:
        return self.with_directions(self.directions @ np.asarray(R).T)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "image_width": self.width,
            "image_height": self.height,
            "area": self.area.to_dict(),
            "grid_w": self.grid_w,
            "grid_h": self.grid_h,
            "directions": self.directions.reshape(-1).tolist(),
        }


class NoncentralGenericModel(_GridModel):
    """Per control point: a unit line direction and a 3D point on the line."""

    kind = "noncentral-generic"
    noncentral = True

    def __init__(self, area, directions, points, width=None, height=None):
        super().__init__(area, directions, width, height)
        p = np.array(points, dtype=np.float64)
        if p.shape != self.directions.shape or not np.all(np.isfinite(p)):
            raise ValueError("line points must be finite with the same shape as directions")
        self.points = p
        self.points.setflags(write=False)

    @property
    def num_parameters(self) -> int:
        return 5 * self.num_control_points

    def unproject_line(self, px):
        """``(origins, unit directions, valid)`` of the observation lines."""
        return self.unproject_lines(px)

    def _projection_residual(self, X, px, derivatives):
        it = self.interpolate(px, derivatives)
        diff = X - it.points
        dist = np.linalg.norm(diff, axis=1)
        dist = np.where(dist < 1e-300, 1e-300, dist)
        m = diff / dist[:, None]
        e = m - it.dirs
        P = self.points.reshape(-1, 3)[it.idx]
        dP = np.stack([np.einsum("nk,nkc->nc", it.wx, P), np.einsum("nk,nkc->nc", it.wy, P)], axis=2)
        proj = dP - m[:, :, None] * np.einsum("nc,nck->nk", m, dP)[:, None, :]
        J = -proj / dist[:, None, None] - self._dir_pixel_jacobian(it)
        return e, J

    def _point_residual_jacobian(self, X, it):
        diff = X - it.points
        n = np.linalg.norm(diff, axis=1)
        m = diff / n[:, None]
        return (np.eye(3)[None] - m[:, :, None] * m[:, None, :]) / n[:, None, None]

    def _parameter_residual_jacobian(self, X, it):
        N = len(X)
        B = -self._direction_blocks(it)  # (N, 3, 16, 2)
        Pm = -self._point_residual_jacobian(X, it)  # d e / d line point, (N, 3, 3)
        C = Pm[:, :, None, :] * it.w[:, None, :, None]  # (N, 3, 16, 3)
        return np.concatenate([B, C], axis=3).reshape(N, 3, 80)

    def with_grids(self, directions, points) -> NoncentralGenericModel:
        return NoncentralGenericModel(self.area, directions, points, self.width, self.height)

    def rotated(self, R) -> NoncentralGenericModel:
        R = np.asarray(R)
        return self.with_grids(self.directions @ R.T, self.points @ R.T)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "image_width": self.width,
            "image_height": self.height,
            "area": self.area.to_dict(),
            "grid_w": self.grid_w,
            "grid_h": self.grid_h,
            "directions": self.directions.reshape(-1).tolist(),
            "points": self.points.reshape(-1).tolist(),
        }


def generic_from_dict(d: dict):
    area = CalibratedArea.from_dict(d["area"])
    shape = (int(d["grid_h"]), int(d["grid_w"]), 3)
    dirs = np.array(d["directions"], dtype=np.float64).reshape(shape)
    w, h = d.get("image_width"), d.get("image_height")
    if d["kind"] == "central-generic":
        return CentralGenericModel(area, dirs, w, h)
    pts = np.array(d["points"], dtype=np.float64).reshape(shape)
    return NoncentralGenericModel(area, dirs, pts, w, h)
