from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from gencalib.lm import DivergenceError, LMSettings, banded_schur_solve, damped_solve, levenberg_marquardt


def banded_spd(n_band, bandwidth, n_tail, seed):
    rng = np.random.default_rng(seed)
    n = n_band + n_tail
    J = np.zeros((3 * n, n))
    for i in range(n_band):
        lo, hi = max(0, i - bandwidth), min(n_band, i + bandwidth + 1)
        for r in range(3):
            J[3 * i + r, lo:hi] = rng.normal(size=hi - lo) * (rng.random(hi - lo) < 0.7)
            J[3 * i + r, i] += 1.0
            J[3 * i + r, n_band:] = rng.normal(size=n_tail)
    for i in range(n_band, n):
        J[3 * i : 3 * i + 3] = rng.normal(size=(3, n))
    # keep the leading block banded: drop couplings wider than the band
    A = J.T @ J
    for i in range(n_band):
        for j in range(n_band):
            if abs(i - j) > 2 * bandwidth:
                A[i, j] = 0.0
    A[:n_band, :n_band] += np.eye(n_band) * (np.abs(A[:n_band, :n_band]).sum(axis=1).max() + 1.0)
    return A, rng.normal(size=n)


@given(
    st.integers(2, 40),
    st.integers(1, 4),
    st.integers(0, 8),
    st.integers(0, 2**31 - 1),
)
def test_banded_schur_solve_matches_dense(n_band, bandwidth, n_tail, seed):
    A, b = banded_spd(n_band, bandwidth, n_tail, seed)
    x = banded_schur_solve(sp.csr_matrix(A), b, n_band)
    ref = np.linalg.solve(A, b)
    assert np.allclose(x, ref, rtol=1e-8, atol=1e-10 * np.abs(ref).max())


def test_damped_solve_sparse_and_dense_agree():
    A, b = banded_spd(20, 2, 3, 1)
    dense = damped_solve(A, b, 1e-3)
    sparse = damped_solve(sp.csr_matrix(A), b, 1e-3)
    banded = damped_solve(sp.csr_matrix(A), b, 1e-3, n_band=20)
    D = A + np.diag(1e-3 * np.diag(A))
    ref = -np.linalg.solve(D, b)
    for x in (dense, sparse, banded):
        assert np.allclose(x, ref, rtol=1e-9)


def rosenbrock_residual(x):
    return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])


def rosenbrock_jacobian(x):
    return np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])


def test_rosenbrock_minimum():
    res = levenberg_marquardt(rosenbrock_residual, rosenbrock_jacobian, [-1.2, 1.0], LMSettings(max_iterations=200))
    assert res.converged
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)
    assert res.cost < 1e-12 < res.initial_cost


def test_linear_least_squares_matches_lstsq():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(30, 5))
    b = rng.normal(size=30)
    res = levenberg_marquardt(lambda x: A @ x - b, lambda x: A, np.zeros(5))
    assert np.allclose(res.x, np.linalg.lstsq(A, b, rcond=None)[0], atol=1e-7)


def test_manifold_update_is_used():
    # minimize distance to a target angle on the circle, parameterized by the point itself
    target = np.array([np.cos(1.0), np.sin(1.0)])

    def residual(p):
        return p - target

    def jacobian(p):
        return np.array([[-p[1]], [p[0]]])

    def update(p, dx):
        c, s = np.cos(dx[0]), np.sin(dx[0])
        return np.array([c * p[0] - s * p[1], s * p[0] + c * p[1]])

    res = levenberg_marquardt(residual, jacobian, [1.0, 0.0], update=update)
    assert np.allclose(res.x, target, atol=1e-7)
    assert np.isclose(np.linalg.norm(res.x), 1.0)


def test_non_finite_initial_residuals_rejected():
    with pytest.raises(ValueError):
        levenberg_marquardt(lambda x: np.array([np.nan]), lambda x: np.ones((1, 1)), [0.0])


def test_no_accepted_step_raises():
    # the Jacobian points the wrong way, so no step ever lowers the cost
    with pytest.raises(DivergenceError):
        levenberg_marquardt(
            lambda x: np.array([x[0] - 1.0]),
            lambda x: np.array([[-1.0]]),
            [0.0],
            LMSettings(max_iterations=30, param_tolerance=0.0),
        )
