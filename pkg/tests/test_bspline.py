from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gencalib.models.bspline import DomainError, basis, bspline_surface_eval, curve_weights


def de_boor_uniform(ctrl, t):
    """De Boor's algorithm for a uniform cubic B-spline curve.

    Control point ``k`` belongs to knot span ``[k - 2, k + 2]`` (knots at the
    integers shifted by one), matching a curve defined on ``[1, n - 2]``.
    """
    n = len(ctrl)
    knots = np.arange(-2, n + 2, dtype=np.float64)  # knots[k + 2] = k
    p = 3
    # span index l with knots[l] <= t < knots[l + 1], restricted to the valid range
    l = int(np.clip(np.floor(t) + 2, p, n - 1))
    d = [np.array(ctrl[j + l - p], dtype=np.float64) for j in range(p + 1)]
    for r in range(1, p + 1):
        for j in range(p, r - 1, -1):
            a = (t - knots[j + l - p]) / (knots[j + 1 + l - r] - knots[j + l - p])
            d[j] = (1.0 - a) * d[j - 1] + a * d[j]
    return d[p]


def de_boor_surface(grid, u, v):
    rows = [de_boor_uniform(grid[r], u) for r in range(grid.shape[0])]
    return de_boor_uniform(np.array(rows), v)


@st.composite
def grids_and_params(draw):
    nx = draw(st.integers(4, 9))
    ny = draw(st.integers(4, 9))
    seed = draw(st.integers(0, 2**31 - 1))
    grid = np.random.default_rng(seed).normal(size=(ny, nx, 3))
    u = draw(st.floats(1.0, nx - 2.0))
    v = draw(st.floats(1.0, ny - 2.0))
    return grid, u, v


@given(grids_and_params())
def test_surface_matches_de_boor(args):
    grid, u, v = args
    assert np.abs(bspline_surface_eval(grid, u, v) - de_boor_surface(grid, u, v)).max() <= 1e-12


@given(st.floats(0.0, 1.0))
def test_basis_partition_of_unity(t):
    w = basis(t)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.all(w >= 0)


def test_constant_grid_reproduces_constant():
    grid = np.full((6, 7, 3), [0.2, -1.0, 4.0])
    assert np.allclose(bspline_surface_eval(grid, 3.3, 2.1), [0.2, -1.0, 4.0], atol=1e-14)


def test_linear_grid_reproduces_linear():
    gy, gx = np.mgrid[0:6, 0:7].astype(float)
    grid = np.stack([2 * gx + 1, -gy, gx + gy], axis=-1)
    # uniform cubic B-splines reproduce linear functions exactly
    assert np.allclose(bspline_surface_eval(grid, 2.5, 3.25), [6.0, -3.25, 5.75], atol=1e-13)


def test_curve_derivative_matches_finite_differences():
    ctrl = np.random.default_rng(0).normal(size=8)
    t = np.array([2.37])
    idx, w, dw = curve_weights(t, 8, derivatives=True)
    h = 1e-6
    f = lambda s: (curve_weights(np.array([s]), 8)[1] * ctrl[curve_weights(np.array([s]), 8)[0]]).sum()
    assert (dw * ctrl[idx]).sum() == pytest.approx((f(t[0] + h) - f(t[0] - h)) / (2 * h), abs=1e-7)


@pytest.mark.parametrize("u,v", [(0.99, 2.0), (2.0, 0.5), (5.01, 2.0), (2.0, 4.5)])
def test_outside_domain_is_an_error(u, v):
    with pytest.raises(DomainError):
        bspline_surface_eval(np.zeros((5, 7, 3)), u, v)


def test_small_grid_is_an_error():
    with pytest.raises(DomainError):
        bspline_surface_eval(np.zeros((3, 7)), 1.5, 1.5)
