"""Uniform cubic B-spline surfaces over a regular control grid.

A grid with ``n`` control points along an axis is defined for parameters in
``[1, n - 2]``; parameter ``t`` in segment ``[i, i + 1]`` blends control
points ``i - 1 .. i + 2``.
"""

from __future__ import annotations

import numpy as np


class DomainError(ValueError):
    """Parameter outside the range where a full 4x4 support exists."""


def basis(t) -> np.ndarray:
    """The four cubic B-spline blending weights for fractional position t."""
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    t3 = t2 * t
    s = 1.0 - t
    return np.stack(
        [s * s * s / 6.0, (3 * t3 - 6 * t2 + 4) / 6.0, (-3 * t3 + 3 * t2 + 3 * t + 1) / 6.0, t3 / 6.0],
        axis=-1,
    )


def basis_derivative(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    return np.stack(
        [-(1 - t) ** 2 / 2.0, (3 * t2 - 4 * t) / 2.0, (-3 * t2 + 2 * t + 1) / 2.0, t2 / 2.0], axis=-1
    )


def segments(t, n: int):
    """Segment index (clamped so the upper end stays in the last segment) and fraction."""
    i = np.clip(np.floor(t), 1, n - 3).astype(np.intp)
    return i, t - i


def in_domain(u, v, nx: int, ny: int):
    u = np.asarray(u)
    v = np.asarray(v)
    return (u >= 1) & (u <= nx - 2) & (v >= 1) & (v <= ny - 2)


def surface_weights(u, v, nx: int, ny: int, derivatives: bool = False):
    """Flat control indices (N, 16) and blending weights (N, 16).

    With ``derivatives`` also returns the weights' partials d/du and d/dv.
    Callers are responsible for the domain check.
    """
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    iu, fu = segments(u, nx)
    iv, fv = segments(v, ny)
    bu = basis(fu)
    bv = basis(fv)
    offs = np.arange(-1, 3)
    cols = iu[:, None] + offs[None, :]
    rows = iv[:, None] + offs[None, :]
    idx = (rows[:, :, None] * nx + cols[:, None, :]).reshape(-1, 16)
    w = (bv[:, :, None] * bu[:, None, :]).reshape(-1, 16)
    if not derivatives:
        return idx, w
    du = (bv[:, :, None] * basis_derivative(fu)[:, None, :]).reshape(-1, 16)
    dv = (basis_derivative(fv)[:, :, None] * bu[:, None, :]).reshape(-1, 16)
    return idx, w, du, dv


def bspline_surface_eval(grid, u: float, v: float) -> np.ndarray:
    """Evaluate the surface with control values ``grid[row, col, :]`` at (u, v).

    ``u`` runs along columns, ``v`` along rows.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 2:
        grid = grid[:, :, None]
    ny, nx = grid.shape[:2]
    if nx < 4 or ny < 4:
        raise DomainError("control grid needs at least 4x4 points")
    if not in_domain(u, v, nx, ny):
        raise DomainError(f"({u}, {v}) outside [1, {nx - 2}] x [1, {ny - 2}]")
    idx, w = surface_weights(u, v, nx, ny)
    flat = grid.reshape(nx * ny, -1)
    return (w[0, :, None] * flat[idx[0]]).sum(axis=0)


def curve_weights(t, n: int, derivatives: bool = False):
    """1D analogue of :func:`surface_weights`: indices (N, 4) and weights."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    i, f = segments(t, n)
    idx = i[:, None] + np.arange(-1, 3)[None, :]
    if derivatives:
        return idx, basis(f), basis_derivative(f)
    return idx, basis(f)
