"""Ground-truth cameras for synthetic scenarios.

These cameras define un-projection in closed form (pixel -> line) and project
numerically, which is the cheap direction for rendering. The "wavy" cameras
add low-amplitude sinusoidal distortion that no parametric baseline can
represent, while staying smooth enough for a 10 px/cell grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class _LineCamera:
    width: int
    height: int

    def _lines(self, px: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def unproject_lines(self, px):
        px = np.atleast_2d(np.asarray(px, dtype=np.float64))
        o, d = self._lines(px)
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        valid = np.all(np.isfinite(px), axis=1)
        return o, d, valid

    def unproject(self, px):
        _, d, ok = self.unproject_lines(px)
        return d, ok

    def _residual(self, X, px):
        o, d, _ = self.unproject_lines(px)
        m = X - o
        m = m / np.linalg.norm(m, axis=1, keepdims=True)
        return m - d

    def project(self, points, init=None, iterations: int = 30):
        """Gauss-Newton over pixels with a finite-difference Jacobian."""
        X = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(X)
        if init is None:
            px = self._initial_guess(X)
        else:
            px = np.array(init, dtype=np.float64).reshape(n, 2)
        h = 1e-3
        # points far outside the view may diverge; they end up marked invalid
        with np.errstate(all="ignore"):
            px, e = self._gauss_newton(X, px, h, iterations)
        valid = (X[:, 2] > 0) & (np.einsum("nc,nc->n", e, e) < 1e-20) & np.all(np.isfinite(px), axis=1)
        return px, valid

    def _gauss_newton(self, X, px, h, iterations):
        for _ in range(iterations):
            e = self._residual(X, px)
            jx = (self._residual(X, px + [h, 0]) - self._residual(X, px - [h, 0])) / (2 * h)
            jy = (self._residual(X, px + [0, h]) - self._residual(X, px - [0, h])) / (2 * h)
            J = np.stack([jx, jy], axis=2)
            A = np.einsum("nci,ncj->nij", J, J)
            g = np.einsum("nci,nc->ni", J, e)
            det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
            det = np.where(np.abs(det) < 1e-300, 1e-300, det)
            step = -np.column_stack(
                [(A[:, 1, 1] * g[:, 0] - A[:, 0, 1] * g[:, 1]) / det, (A[:, 0, 0] * g[:, 1] - A[:, 1, 0] * g[:, 0]) / det]
            )
            step = np.where(np.isfinite(step), step, 0.0)
            px = px + step
            if np.max(np.abs(step), initial=0.0) < 1e-11:
                break
        return px, self._residual(X, px)

    def _initial_guess(self, X):
        raise NotImplementedError


@dataclass
class PinholeCamera(_LineCamera):
    fx: float = 520.0
    fy: float = 520.0
    cx: float = 319.5
    cy: float = 239.5
    width: int = 640
    height: int = 480

    def _lines(self, px):
        d = np.column_stack([(px[:, 0] - self.cx) / self.fx, (px[:, 1] - self.cy) / self.fy, np.ones(len(px))])
        return np.zeros_like(d), d

    def project(self, points, init=None, iterations: int = 0):
        X = np.atleast_2d(np.asarray(points, dtype=np.float64))
        ok = X[:, 2] > 1e-12
        z = np.where(ok, X[:, 2], 1.0)
        px = np.column_stack([self.fx * X[:, 0] / z + self.cx, self.fy * X[:, 1] / z + self.cy])
        return px, ok

    def _initial_guess(self, X):
        return self.project(X)[0]


@dataclass
class WavyCamera(_LineCamera):
    """Pinhole + radial term + sinusoidal ripple, defined pixel -> direction.

    The ripple shifts the normalized coordinates by ``amplitude`` pixels
    (divided by the focal length) with the given ``wavelength`` in pixels,
    mixing both axes so the field is neither radial nor tangential.
    """

    fx: float = 520.0
    fy: float = 520.0
    cx: float = 319.5
    cy: float = 239.5
    k1: float = -0.05
    amplitude: float = 0.25
    wavelength: float = 220.0
    phase: tuple[float, float] = (0.3, 1.1)
    width: int = 640
    height: int = 480

    def normalized(self, px):
        u = (px[:, 0] - self.cx) / self.fx
        v = (px[:, 1] - self.cy) / self.fy
        r2 = u * u + v * v
        k = 2 * np.pi / self.wavelength
        a = self.amplitude / self.fx
        wx = a * np.sin(k * px[:, 1] + self.phase[0]) * np.cos(0.5 * k * px[:, 0])
        wy = a * np.sin(k * px[:, 0] + self.phase[1]) * np.cos(0.5 * k * px[:, 1])
        return u * (1 + self.k1 * r2) + wx, v * (1 + self.k1 * r2) + wy

    def _lines(self, px):
        x, y = self.normalized(px)
        d = np.column_stack([x, y, np.ones(len(px))])
        return np.zeros_like(d), d

    def _initial_guess(self, X):
        z = np.where(np.abs(X[:, 2]) > 1e-12, X[:, 2], 1e-12)
        x, y = X[:, 0] / z, X[:, 1] / z
        # invert the radial term approximately; Gauss-Newton removes the rest
        r2 = x * x + y * y
        s = 1 - self.k1 * r2
        return np.column_stack([self.fx * x * s + self.cx, self.fy * y * s + self.cy])

    def project(self, points, init=None, iterations: int = 30):
        X = np.atleast_2d(np.asarray(points, dtype=np.float64))
        # central: iterate directly on normalized-coordinate mismatch
        z = np.where(np.abs(X[:, 2]) > 1e-12, X[:, 2], 1e-12)
        target = np.column_stack([X[:, 0] / z, X[:, 1] / z])
        px = self._initial_guess(X) if init is None else np.array(init, dtype=np.float64).reshape(-1, 2)
        h = 1e-3

        def f(p):
            return np.column_stack(self.normalized(p))

        with np.errstate(all="ignore"):
            for _ in range(iterations):
                e = f(px) - target
                jx = (f(px + [h, 0]) - f(px - [h, 0])) / (2 * h)
                jy = (f(px + [0, h]) - f(px - [0, h])) / (2 * h)
                det = jx[:, 0] * jy[:, 1] - jy[:, 0] * jx[:, 1]
                det = np.where(np.abs(det) < 1e-300, 1e-300, det)
                step = -np.column_stack([(jy[:, 1] * e[:, 0] - jy[:, 0] * e[:, 1]) / det, (jx[:, 0] * e[:, 1] - jx[:, 1] * e[:, 0]) / det])
                px = px + step
                if np.max(np.abs(step), initial=0.0) < 1e-12:
                    break
            e = f(px) - target
        valid = (X[:, 2] > 1e-12) & (np.abs(e).max(axis=1) < 1e-12) & np.all(np.isfinite(px), axis=1)
        return px, valid


@dataclass
class NoncentralWavyCamera(WavyCamera):
    """WavyCamera whose line origins move with the pixel (meters).

    Origins lie on a small cap: z offset ``axial * r_n^2`` plus a lateral
    ripple of size ``lateral``, where ``r_n`` is the radius normalized so the
    image corners reach 1. Offsets stay within ``axial + lateral``.
    """

    axial: float = 0.0015
    lateral: float = 0.0005
    origin_wavelength: float = 400.0

    def origins(self, px):
        half = np.hypot(self.width / 2, self.height / 2)
        rx = (px[:, 0] - self.cx) / half
        ry = (px[:, 1] - self.cy) / half
        k = 2 * np.pi / self.origin_wavelength
        return np.column_stack(
            [
                self.lateral * np.sin(k * px[:, 0]) * np.cos(k * px[:, 1]),
                self.lateral * np.cos(k * px[:, 0] + 0.7) * np.sin(k * px[:, 1]),
                self.axial * (rx * rx + ry * ry),
            ]
        )

    def _lines(self, px):
        _, d = super()._lines(px)
        return self.origins(px), d

    def project(self, points, init=None, iterations: int = 30):
        X = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if init is None:
            # the central projection is within a few px for points >= 0.2 m away
            init, _ = WavyCamera.project(self, X)
        return _LineCamera.project(self, X, init=init, iterations=iterations)

    def _initial_guess(self, X):
        return WavyCamera._initial_guess(self, X)


@dataclass
class CameraSpec:
    """JSON-friendly description of a ground-truth camera."""

    kind: str = "wavy"
    params: dict = field(default_factory=dict)

    def build(self):
        cls = {"pinhole": PinholeCamera, "wavy": WavyCamera, "noncentral-wavy": NoncentralWavyCamera}[self.kind]
        params = dict(self.params)
        if "phase" in params:
            params["phase"] = tuple(params["phase"])
        return cls(**params)
