"""Closed-form parametric baselines: OpenCV-style 12-parameter polynomial,
Thin-Prism Fisheye, and Central Radial (spline radial factor).

All models share the layout ``[fx, fy, cx, cy, <distortion...>]`` and map a
camera-frame point to normalized coordinates, distort them, then apply the
affine pixel transform. Un-projection inverts the distortion with Newton's
method.
"""

from __future__ import annotations

import numpy as np

from . import bspline


class ModelDomainError(ValueError):
    """Point outside the region where the model is defined."""


class ParametricModel:
    kind = "parametric"
    param_names: tuple[str, ...] = ()

    def __init__(self, params, width: int, height: int):
        p = np.array(params, dtype=np.float64).reshape(-1)
        if p.size != len(self.param_names):
            raise ValueError(f"{self.kind} expects {len(self.param_names)} parameters, got {p.size}")
        self.params = p
        self.params.setflags(write=False)
        self.width = int(width)
        self.height = int(height)

    @property
    def num_parameters(self) -> int:
        return self.params.size

    @property
    def fx(self):
        return self.params[0]

    @property
    def fy(self):
        return self.params[1]

    @property
    def cx(self):
        return self.params[2]

    @property
    def cy(self):
        return self.params[3]

    def with_params(self, params):
        return type(self)(params, self.width, self.height)

    def check_valid(self) -> bool:
        return bool(self.fx > 0 and self.fy > 0 and 0 <= self.cx <= self.width and 0 <= self.cy <= self.height)

    # normalized-plane distortion, implemented per subclass
    def distort(self, xy) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def _normalize(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        z = X[:, 2]
        ok = z > 1e-12
        zs = np.where(ok, z, 1.0)
        return np.column_stack([X[:, 0] / zs, X[:, 1] / zs]), ok

    def project(self, points, init=None):
        """Camera-frame points to pixels; returns ``(px, valid)``.

        ``init`` is accepted for interface parity with generic models.
        """
        xy, ok = self._normalize(points)
        d, dok = self.distort(xy)
        px = np.column_stack([self.fx * d[:, 0] + self.cx, self.fy * d[:, 1] + self.cy])
        return px, ok & dok & np.all(np.isfinite(px), axis=1)

    def project_one(self, point) -> np.ndarray:
        px, ok = self.project(np.asarray(point, dtype=np.float64).reshape(1, 3))
        if not ok[0]:
            raise ModelDomainError(f"point {point} outside the model's domain")
        return px[0]

    def projection_jacobians(self, points, px=None):
        """Central-difference derivatives ``(dpx_dX (N, 2, 3), dpx_dparams (N, 2, P))``."""
        X = np.atleast_2d(np.asarray(points, dtype=np.float64))
        hX = 1e-6 * np.maximum(np.linalg.norm(X, axis=1), 1e-12)
        dX = np.empty((len(X), 2, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            a, _ = self.project(X + hX[:, None] * e)
            b, _ = self.project(X - hX[:, None] * e)
            dX[:, :, k] = (a - b) / (2 * hX[:, None])
        dP = np.empty((len(X), 2, self.num_parameters))
        for k in range(self.num_parameters):
            h = 1e-6 * max(1.0, abs(self.params[k]))
            p = self.params.copy()
            p[k] += h
            a, _ = self.with_params(p).project(X)
            p[k] -= 2 * h
            b, _ = self.with_params(p).project(X)
            dP[:, :, k] = (a - b) / (2 * h)
        return dX, dP

    def undistort(self, target, init=None, iterations: int = 50):
        """Newton inversion of :meth:`distort`; returns ``(xy, valid)``."""
        target = np.atleast_2d(np.asarray(target, dtype=np.float64))
        xy = target.copy() if init is None else np.array(init, dtype=np.float64)
        h = 1e-7
        active = np.ones(len(xy), dtype=bool)
        err = np.full(len(xy), np.inf)
        for _ in range(iterations):
            a = np.flatnonzero(active)
            if a.size == 0:
                break
            f0, _ = self.distort(xy[a])
            fxp, _ = self.distort(xy[a] + [h, 0])
            fxm, _ = self.distort(xy[a] - [h, 0])
            fyp, _ = self.distort(xy[a] + [0, h])
            fym, _ = self.distort(xy[a] - [0, h])
            J = np.stack([(fxp - fxm) / (2 * h), (fyp - fym) / (2 * h)], axis=2)
            r = f0 - target[a]
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            det = np.where(np.abs(det) < 1e-300, 1e-300, det)
            step = -np.column_stack(
                [(J[:, 1, 1] * r[:, 0] - J[:, 0, 1] * r[:, 1]) / det, (J[:, 0, 0] * r[:, 1] - J[:, 1, 0] * r[:, 0]) / det]
            )
            # limit steps to keep Newton inside the basin
            sn = np.linalg.norm(step, axis=1)
            step *= np.minimum(1.0, 0.5 / np.maximum(sn, 1e-300))[:, None]
            xy[a] += step
            err[a] = np.abs(r).max(axis=1)
            active[a[np.max(np.abs(step), axis=1) < 1e-14]] = False
            active &= np.all(np.isfinite(xy), axis=1)
        f, ok = self.distort(xy)
        ok &= np.max(np.abs(f - target), axis=1) < 1e-9
        return xy, ok

    def unproject(self, px, init=None):
        """Unit directions for pixels; returns ``(dirs, valid)``."""
        px = np.atleast_2d(np.asarray(px, dtype=np.float64))
        target = np.column_stack([(px[:, 0] - self.cx) / self.fx, (px[:, 1] - self.cy) / self.fy])
        xy, ok = self.undistort(target, init)
        d = np.column_stack([xy, np.ones(len(xy))])
        return d / np.linalg.norm(d, axis=1, keepdims=True), ok

    def unproject_lines(self, px):
        dirs, ok = self.unproject(px)
        return np.zeros_like(dirs), dirs, ok

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "image_width": self.width,
            "image_height": self.height,
            "params": dict(zip(self.param_names, map(float, self.params))),
        }

    @classmethod
    def pinhole(cls, fx, fy, cx, cy, width, height, **kw):
        p = np.zeros(len(cls.param_names))
        p[:4] = fx, fy, cx, cy
        return cls(p, width, height, **kw)


class Polynomial12(ParametricModel):
    """OpenCV rational model with all radial and tangential terms."""

    kind = "polynomial12"
    param_names = ("fx", "fy", "cx", "cy", "k1", "k2", "k3", "k4", "k5", "k6", "p1", "p2")

    def distort(self, xy):
        k1, k2, k3, k4, k5, k6, p1, p2 = self.params[4:]
        x, y = xy[:, 0], xy[:, 1]
        r2 = x * x + y * y
        num = 1 + r2 * (k1 + r2 * (k2 + r2 * k3))
        den = 1 + r2 * (k4 + r2 * (k5 + r2 * k6))
        ok = np.abs(den) > 1e-12
        radial = num / np.where(ok, den, 1.0)
        xd = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
        yd = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
        return np.column_stack([xd, yd]), ok


class ThinPrismFisheye(ParametricModel):
    """Equidistant fisheye with 4 radial, 2 tangential and 2 thin-prism terms."""

    kind = "thin-prism-fisheye"
    param_names = ("fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2", "k3", "k4", "sx1", "sy1")

    def distort(self, xy):
        k1, k2, p1, p2, k3, k4, sx1, sy1 = self.params[4:]
        r = np.hypot(xy[:, 0], xy[:, 1])
        small = r < 1e-12
        theta = np.arctan(r)
        scale = np.where(small, 1.0, theta / np.where(small, 1.0, r))
        u = xy[:, 0] * scale
        v = xy[:, 1] * scale
        t2 = u * u + v * v
        radial = t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4)))
        du = u * radial + 2 * p1 * u * v + p2 * (t2 + 2 * u * u) + sx1 * t2
        dv = v * radial + 2 * p2 * u * v + p1 * (t2 + 2 * v * v) + sy1 * t2
        return np.column_stack([u + du, v + dv]), np.ones(len(u), dtype=bool)


class CentralRadial(ParametricModel):
    """OpenCV-style model whose radial factor is a uniform cubic spline in r.

    The spline spans normalized radius ``[0, max_radius]`` with
    ``spline_points`` control values; ``max_radius`` is fixed at construction
    and not optimized. With the default 250 control points there are 258
    parameters.
    """

    kind = "central-radial"
    base_names = ("fx", "fy", "cx", "cy", "p1", "p2", "sx1", "sy1")

    def __init__(self, params, width, height, max_radius: float = 1.0):
        p = np.array(params, dtype=np.float64).reshape(-1)
        if p.size < 12:
            raise ValueError("central-radial needs at least 4 spline control points")
        self.param_names = self.base_names + tuple(f"s{i}" for i in range(p.size - 8))
        self.max_radius = float(max_radius)
        super().__init__(p, width, height)

    @property
    def spline_points(self) -> int:
        return self.params.size - 8

    def with_params(self, params):
        return CentralRadial(params, self.width, self.height, self.max_radius)

    @classmethod
    def pinhole(cls, fx, fy, cx, cy, width, height, max_radius=1.0, spline_points=250):
        p = np.zeros(8 + spline_points)
        p[:4] = fx, fy, cx, cy
        p[8:] = 1.0
        return cls(p, width, height, max_radius)

    def radial_factor(self, r):
        n = self.spline_points
        t = 1.0 + np.asarray(r) / self.max_radius * (n - 3)
        ok = (t >= 1.0) & (t <= n - 2)
        idx, w = bspline.curve_weights(np.clip(t, 1.0, n - 2), n)
        return (w * self.params[8:][idx]).sum(axis=1), ok

    def distort(self, xy):
        p1, p2, sx1, sy1 = self.params[4:8]
        x, y = xy[:, 0], xy[:, 1]
        r2 = x * x + y * y
        radial, ok = self.radial_factor(np.sqrt(r2))
        xd = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x) + sx1 * r2
        yd = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y + sy1 * r2
        return np.column_stack([xd, yd]), ok

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["max_radius"] = self.max_radius
        return d


PARAMETRIC_KINDS = {
    Polynomial12.kind: Polynomial12,
    ThinPrismFisheye.kind: ThinPrismFisheye,
    CentralRadial.kind: CentralRadial,
}


def parametric_from_dict(d: dict) -> ParametricModel:
    cls = PARAMETRIC_KINDS[d["kind"]]
    params = d["params"]
    if isinstance(params, dict):
        # keys may come back sorted, so look parameters up by name
        names = cls.param_names
        if cls is CentralRadial:
            names = CentralRadial.base_names + tuple(f"s{i}" for i in range(len(params) - 8))
        values = [params[k] for k in names]
    else:
        values = list(params)
    if cls is CentralRadial:
        return CentralRadial(values, d["image_width"], d["image_height"], d.get("max_radius", 1.0))
    return cls(values, d["image_width"], d["image_height"])


def project_parametric(model: ParametricModel, point) -> np.ndarray:
    """Project one camera-frame point; raises ModelDomainError outside the domain."""
    return model.project_one(point)
