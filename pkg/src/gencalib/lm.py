"""Levenberg-Marquardt schedule shared by feature refinement, fitting and BA."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import warnings

import numpy as np
import scipy.linalg as sl
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve


class DivergenceError(RuntimeError):
    """No LM step was accepted before the iteration budget ran out."""


@dataclass
class LMSettings:
    initial_damping: float = 1e-4
    damping_increase: float = 10.0
    damping_decrease: float = 0.1
    max_iterations: int = 100
    param_tolerance: float = 1e-8
    cost_tolerance: float = 1e-10
    max_damping: float = 1e12
    min_damping: float = 1e-15

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    initial_cost: float
    iterations: int
    accepted: int
    converged: bool
    residuals: np.ndarray


def _block_cholesky(B, bs: int):
    """Cholesky of a sparse SPD matrix with bandwidth <= ``bs``, stored as
    block-tridiagonal factors ``(diagonal blocks, sub-diagonal blocks)``."""
    n = B.shape[0]
    diag, off = [], []
    for s0 in range(0, n, bs):
        s1 = min(n, s0 + bs)
        Bkk = B[s0:s1, s0:s1].toarray()
        if s0 > 0:
            Bk = B[s0:s1, s0 - bs : s0].toarray()
            Lo = sl.solve_triangular(diag[-1], Bk.T, lower=True).T
            Bkk -= Lo @ Lo.T
            off.append(Lo)
        diag.append(np.linalg.cholesky(Bkk))
    return diag, off


def _block_forward(diag, off, R, bs):
    Y = np.empty_like(R)
    for k, Lkk in enumerate(diag):
        s0 = k * bs
        rhs = R[s0 : s0 + len(Lkk)]
        if k > 0:
            rhs = rhs - off[k - 1] @ Y[s0 - bs : s0]
        Y[s0 : s0 + len(Lkk)] = sl.solve_triangular(Lkk, rhs, lower=True)
    return Y


def _block_backward(diag, off, Z, bs):
    X = np.empty_like(Z)
    for k in range(len(diag) - 1, -1, -1):
        Lkk = diag[k]
        s0 = k * bs
        rhs = Z[s0 : s0 + len(Lkk)]
        if k + 1 < len(diag):
            rhs = rhs - off[k].T @ X[s0 + bs : s0 + bs + len(diag[k + 1])]
        X[s0 : s0 + len(Lkk)] = sl.solve_triangular(Lkk, rhs, lower=True, trans="T")
    return X


def banded_schur_solve(A, b: np.ndarray, n_band: int) -> np.ndarray:
    """Solve the SPD system ``A x = b`` whose leading ``n_band`` block has a
    small bandwidth and whose trailing block is small.

    The leading block gets a block-tridiagonal Cholesky factorization; the
    trailing unknowns are solved densely through their Schur complement.
    """
    A = sp.csr_matrix(A)
    B = A[:n_band, :n_band].tocsr()
    U = sp.triu(B).tocoo()
    bs = max(int((U.col - U.row).max(initial=0)), 1)
    diag, off = _block_cholesky(B, bs)
    C = A[:n_band, n_band:].toarray()
    D = A[n_band:, n_band:].toarray()
    Y = _block_forward(diag, off, np.column_stack([C, b[:n_band]]), bs)
    m = A.shape[0] - n_band
    Yc, y = Y[:, :m], Y[:, m]
    if m:
        S = D - Yc.T @ Yc
        with warnings.catch_warnings():
            # gauge freedoms leave S nearly singular; damping keeps the step finite
            warnings.simplefilter("ignore", sl.LinAlgWarning)
            x2 = sl.solve(S, b[n_band:] - Yc.T @ y, assume_a="pos")
        z = y - Yc @ x2
    else:
        x2 = np.zeros(0)
        z = y
    x1 = _block_backward(diag, off, z[:, None], bs)[:, 0]
    return np.concatenate([x1, x2])


def damped_solve(JtJ, g: np.ndarray, damping: float, n_band: int | None = None) -> np.ndarray:
    """Solve (JtJ + damping * diag(JtJ)) dx = -g; JtJ may be a scipy sparse matrix.

    ``n_band`` enables :func:`banded_schur_solve` for sparse systems whose
    leading ``n_band`` unknowns form a banded block.
    """
    if sp.issparse(JtJ):
        diag = JtJ.diagonal()
        floor = 1e-12 * max(diag.max(initial=0.0), 1e-300)
        A = (JtJ + sp.diags(damping * np.maximum(diag, floor))).tocsc()
        if n_band:
            try:
                return banded_schur_solve(A, -g, n_band)
            except (np.linalg.LinAlgError, ValueError):
                pass
        dx = spsolve(A, -g)
        if not np.all(np.isfinite(dx)):
            dx = -np.linalg.lstsq(A.toarray(), g, rcond=None)[0]
        return dx
    diag = np.diag(JtJ).copy()
    floor = 1e-12 * max(diag.max(initial=0.0), 1e-300)
    A = JtJ + np.diag(damping * np.maximum(diag, floor))
    try:
        return -np.linalg.solve(A, g)
    except np.linalg.LinAlgError:
        return -np.linalg.lstsq(A, g, rcond=None)[0]


def levenberg_marquardt(
    residual_fn: Callable[[np.ndarray], np.ndarray],
    jacobian_fn: Callable[[np.ndarray], np.ndarray],
    x0,
    settings: LMSettings | None = None,
    update: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    step_converged: Callable[[np.ndarray], bool] | None = None,
) -> LMResult:
    """Minimize 0.5 * ||r(x)||^2 with a Marquardt-scaled LM loop.

    ``update(x, dx)`` lets callers apply local (manifold) updates; the default
    is plain addition. ``residual_fn`` may return non-finite values to signal
    an invalid state, which is treated as a rejected step.
    ``step_converged(dx)`` is an extra stopping test applied to accepted
    steps, for problems where only some parameters matter.
    """
    s = settings or LMSettings()
    x = np.array(x0, dtype=np.float64)
    r = residual_fn(x)
    if not np.all(np.isfinite(r)):
        raise ValueError("initial residuals are not finite")
    cost = float(r @ r)
    initial_cost = cost
    lam = s.initial_damping
    accepted = 0
    converged = False
    it = 0
    J = None
    while it < s.max_iterations:
        it += 1
        if J is None:
            J = jacobian_fn(x)
            JtJ = J.T @ J
            g = np.asarray(J.T @ r).ravel()
        if cost == 0.0:
            converged = True
            break
        dx = damped_solve(JtJ, g, lam)
        x_new = update(x, dx) if update is not None else x + dx
        r_new = residual_fn(x_new)
        new_cost = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
        if new_cost < cost:
            rel = (cost - new_cost) / cost
            x, r, cost = x_new, r_new, new_cost
            accepted += 1
            lam = max(lam * s.damping_decrease, s.min_damping)
            J = None
            if np.max(np.abs(dx)) < s.param_tolerance or rel < s.cost_tolerance:
                converged = True
                break
            if step_converged is not None and step_converged(dx):
                converged = True
                break
        else:
            if np.max(np.abs(dx)) < s.param_tolerance:
                converged = True
                break
            lam *= s.damping_increase
            if lam > s.max_damping:
                converged = accepted > 0
                break
    if accepted == 0 and not converged:
        raise DivergenceError(f"no accepted step in {it} iterations")
    return LMResult(x, cost, initial_cost, it, accepted, converged, r)
