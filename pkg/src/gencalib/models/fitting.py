"""Fit a parametric model to a generic one, and compare two calibrations.

Both operations measure differences of observation directions per pixel and
report them as reprojection-equivalent magnitudes (angle times focal length),
after removing the best global rotation between the two camera frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import best_rotation, rotation_from_rotvec, skew
from ..lm import LMSettings, levenberg_marquardt
from .generic import CalibratedArea, _GridModel
from .parametric import PARAMETRIC_KINDS, CentralRadial, ParametricModel


class FitDivergenceError(RuntimeError):
    """Parametric fit did not converge."""


class DisjointAreaError(ValueError):
    """Two calibrations share no calibrated pixels."""


@dataclass
class DeviationMap:
    """Per-pixel direction differences sampled on a regular pixel grid.

    ``magnitude`` is in pixels (angle times ``focal``); ``vectors`` are the
    reprojection-space difference vectors, NaN where undefined.
    """

    pixels: np.ndarray  # (N, 2)
    magnitude: np.ndarray  # (N,)
    vectors: np.ndarray  # (N, 2)
    shape: tuple[int, int]  # (rows, cols) of the sampling grid
    focal: float

    def max(self) -> float:
        m = self.magnitude[np.isfinite(self.magnitude)]
        return float(m.max()) if m.size else float("nan")

    def median(self) -> float:
        m = self.magnitude[np.isfinite(self.magnitude)]
        return float(np.median(m)) if m.size else float("nan")


def _sample_grid(area: CalibratedArea, step: float):
    xs = np.arange(np.ceil(area.min_x), np.floor(area.max_x) + 1e-9, step)
    ys = np.arange(np.ceil(area.min_y), np.floor(area.max_y) + 1e-9, step)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()]), (len(ys), len(xs))


def focal_length_of(model, area: CalibratedArea | None = None) -> float:
    """Pixels per radian near the center of the calibrated area."""
    area = area or model.area
    c = area.center
    px = np.array([c - [0.5, 0], c + [0.5, 0], c - [0, 0.5], c + [0, 0.5]])
    _, d, _ = model.unproject_lines(px)
    ax = np.arccos(np.clip(d[0] @ d[1], -1, 1))
    ay = np.arccos(np.clip(d[2] @ d[3], -1, 1))
    return float(2.0 / (ax + ay))


def _deviation(dirs_a, dirs_b, pixels, focal):
    """Angles between direction sets as px magnitudes and 2D vectors."""
    diff = dirs_b - dirs_a
    # chord-based angle stays accurate for tiny differences
    ang = 2.0 * np.arcsin(np.clip(np.linalg.norm(diff, axis=1) / 2.0, 0.0, 1.0))
    # tangent-plane projection onto the image axes of direction a
    ex = np.cross([0.0, 1.0, 0.0], dirs_a)
    ex /= np.linalg.norm(ex, axis=1, keepdims=True)
    ey = np.cross(dirs_a, ex)
    vec = np.column_stack([np.einsum("nc,nc->n", diff, ex), np.einsum("nc,nc->n", diff, ey)]) * focal
    return ang * focal, vec


def fit_parametric_to_generic(
    target: _GridModel,
    variant: str,
    step: float = 8.0,
    initial: ParametricModel | None = None,
    settings: LMSettings | None = None,
    spline_points: int = 250,
):
    """Fit a parametric ``variant`` to ``target``'s directions up to a rotation.

    Returns ``(model, R, deviation map)`` with ``R`` rotating generic
    directions into the parametric model's frame.
    """
    area = target.area
    pixels, shape = _sample_grid(area, step)
    _, gdirs, ok = target.unproject_lines(pixels)
    pixels, gdirs = pixels[ok], gdirs[ok]
    if len(pixels) < 10:
        raise ValueError("calibrated area too small to fit a parametric model")
    width, height = target.width, target.height
    if initial is None:
        f = focal_length_of(target)
        cls = PARAMETRIC_KINDS[variant]
        c = area.center
        if cls is CentralRadial:
            corners = np.array(
                [[area.min_x, area.min_y], [area.max_x, area.min_y], [area.min_x, area.max_y], [area.max_x, area.max_y]]
            )
            r = np.linalg.norm((corners - c) / f, axis=1).max() * 1.5
            initial = CentralRadial.pinhole(f, f, c[0], c[1], width, height, max_radius=r, spline_points=spline_points)
        else:
            initial = cls.pinhole(f, f, c[0], c[1], width, height)
        # start rotation: align the optical axes
        R0 = best_rotation(gdirs, initial.unproject(pixels)[0])
    else:
        R0 = np.eye(3)
    n = initial.num_parameters

    def split(x):
        return initial.with_params(x[:n]), x[n:].reshape(3, 3)

    def residual(x):
        model, R = split(x)
        d, ok = model.unproject(pixels)
        r = d - gdirs @ R.T
        r[~ok] = np.nan
        return r.ravel()

    def jacobian(x):
        model, R = split(x)
        base = residual(x)
        J = np.empty((base.size, n + 3))
        for k in range(n):
            h = 1e-7 * max(1.0, abs(x[k]))
            xp = x.copy()
            xp[k] += h
            xm = x.copy()
            xm[k] -= h
            J[:, k] = (residual(xp) - residual(xm)) / (2 * h)
        # residual derivative for the left-multiplied rotation update
        J[:, n:] = skew(gdirs @ R.T).reshape(-1, 3)
        J[~np.isfinite(J)] = 0.0
        return J

    def update(x, dx):
        out = x.copy()
        out[:n] += dx[:n]
        R = rotation_from_rotvec(dx[n:]) @ x[n:].reshape(3, 3)
        out[n:] = R.ravel()
        return out

    x0 = np.concatenate([initial.params, R0.ravel()])
    settings = settings or LMSettings(max_iterations=200, cost_tolerance=1e-14, param_tolerance=1e-12)
    res = levenberg_marquardt(residual, jacobian, x0, settings, update=update)
    if not np.all(np.isfinite(res.residuals)):
        raise FitDivergenceError("parametric fit left the model's valid domain")
    if not res.converged and res.accepted == 0:
        raise FitDivergenceError("parametric fit made no progress")
    model, R = split(res.x)
    all_px, shape = _sample_grid(area, step)
    _, gd, gok = target.unproject_lines(all_px)
    pd, pok = model.unproject(all_px)
    mag, vec = _deviation(pd, gd @ R.T, all_px, focal_length_of(model, area))
    bad = ~(gok & pok)
    mag[bad] = np.nan
    vec[bad] = np.nan
    return model, R, DeviationMap(all_px, mag, vec, shape, focal_length_of(model, area))


def compare_generic(a, b, step: float = 8.0):
    """Direction differences between two calibrations after the best rotation.

    Returns ``(R, deviation map)`` with ``R`` mapping ``b``'s directions into
    ``a``'s frame.
    """
    try:
        area = a.area.intersect(b.area) if hasattr(b, "area") else a.area
    except ValueError:
        raise DisjointAreaError("calibrated areas do not overlap") from None
    pixels, shape = _sample_grid(area, step)
    _, da, oka = a.unproject_lines(pixels)
    _, db, okb = b.unproject_lines(pixels)
    ok = oka & okb
    R = best_rotation(db[ok], da[ok])
    f = focal_length_of(a, area)
    mag, vec = _deviation(da, db @ R.T, pixels, f)
    mag[~ok] = np.nan
    vec[~ok] = np.nan
    return R, DeviationMap(pixels, mag, vec, shape, f)
