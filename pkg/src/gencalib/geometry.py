"""Rigid transforms, rotations, and planar homographies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation


class DegenerateConfigurationError(ValueError):
    """Raised for rank-deficient point configurations (collinear, coincident)."""


def skew(v) -> np.ndarray:
    """Cross-product matrix; works on (3,) or (N, 3) input."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rotation_from_rotvec(w) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=np.float64)).as_matrix()


def rotvec_from_rotation(R) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_rotvec()


def rotation_angle(R) -> float:
    """Rotation angle in radians of a 3x3 rotation matrix."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def normalize(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


@dataclass
class Pose:
    """Rigid transform ``x -> R @ x + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.array(self.t, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, w, t) -> Pose:
        return cls(rotation_from_rotvec(w), t)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def inverse(self) -> Pose:
        return Pose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def center(self) -> np.ndarray:
        """Origin of the target frame expressed in the source frame."""
        return -self.R.T @ self.t

    def rotvec(self) -> np.ndarray:
        return rotvec_from_rotation(self.R)

    def perturbed(self, dw, dt) -> Pose:
        """Local update: left-multiplied rotation increment, additive translation."""
        return Pose(rotation_from_rotvec(dw) @ self.R, self.t + np.asarray(dt))

    def to_dict(self) -> dict:
        return {"rotvec": self.rotvec().tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Pose:
        return cls.from_rotvec(d["rotvec"], d["t"])

    def copy(self) -> Pose:
        return Pose(self.R.copy(), self.t.copy())


def best_rotation(a, b, weights=None) -> np.ndarray:
    """Rotation R minimizing sum w ||R a_i - b_i||^2 (Kabsch)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = np.ones(len(a)) if weights is None else np.asarray(weights, dtype=np.float64)
    M = (b * w[:, None]).T @ a
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def _normalizing_transform(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d < 1e-15:
        raise DegenerateConfigurationError("coincident points")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _has_collinear_triple(pts: np.ndarray, tol: float) -> bool:
    n = len(pts)
    scale = np.ptp(pts, axis=0).max() ** 2
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                u = pts[j] - pts[i]
                v = pts[k] - pts[i]
                if abs(u[0] * v[1] - u[1] * v[0]) <= tol * scale:
                    return True
    return False


def fit_homography(src, dst) -> np.ndarray:
    """Normalized DLT homography mapping ``src`` to ``dst`` with H[2, 2] = 1.

    With exactly four correspondences, any collinear triple is rejected since
    the homography is then undetermined.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise DegenerateConfigurationError("need at least four correspondences")
    if n == 4 and (_has_collinear_triple(src, 1e-9) or _has_collinear_triple(dst, 1e-9)):
        raise DegenerateConfigurationError("three of four correspondences are collinear")
    Ts = _normalizing_transform(src)
    Td = _normalizing_transform(dst)
    s = src @ Ts[:2, :2].T + Ts[:2, 2]
    d = dst @ Td[:2, :2].T + Td[:2, 2]
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = s
    A[0::2, 2] = 1
    A[0::2, 6:8] = -d[:, :1] * s
    A[0::2, 8] = -d[:, 0]
    A[1::2, 3:5] = s
    A[1::2, 5] = 1
    A[1::2, 6:8] = -d[:, 1:] * s
    A[1::2, 8] = -d[:, 1]
    _, sv, Vt = np.linalg.svd(A)
    if n > 4 and sv[-2] < 1e-9 * sv[0]:
        raise DegenerateConfigurationError("homography is not uniquely determined")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) < 1e-14:
        raise DegenerateConfigurationError("homography maps the origin to infinity")
    H = H / H[2, 2]
    if abs(np.linalg.det(H)) < 1e-12:
        raise DegenerateConfigurationError("singular homography")
    return H


def apply_homography(H, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    w = pts[..., 0] * H[2, 0] + pts[..., 1] * H[2, 1] + H[2, 2]
    x = (pts[..., 0] * H[0, 0] + pts[..., 1] * H[0, 1] + H[0, 2]) / w
    y = (pts[..., 0] * H[1, 0] + pts[..., 1] * H[1, 1] + H[1, 2]) / w
    return np.stack([x, y], axis=-1)


def pose_from_homography(H, K) -> Pose:
    """Plane-to-camera pose from a homography of the z=0 plane (Zhang)."""
    A = np.linalg.solve(K, H)
    h1, h2, h3 = A[:, 0], A[:, 1], A[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    if h3[2] * lam < 0:
        lam = -lam
    r1 = lam * h1
    r2 = lam * h2
    t = lam * h3
    R = np.column_stack([r1, r2, np.cross(r1, r2)])
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1, 1, -1]) @ Vt
    return Pose(R, t)


def pose_from_direction_homography(pattern_xy, directions) -> Pose:
    """Linear plane pose from unit observation directions (central camera).

    Each direction d_i is parallel to R [x_i, y_i, 0] + t = H [x_i, y_i, 1];
    the constraint d_i x (H p_i) = 0 is solved for H in the least-squares
    sense, then orthonormalized.
    """
    p = np.asarray(pattern_xy, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    if len(p) < 4:
        raise DegenerateConfigurationError("need at least four correspondences")
    T = _normalizing_transform(p)
    pn = p @ T[:2, :2].T + T[:2, 2]
    ph = np.column_stack([pn, np.ones(len(pn))])
    rows = []
    for k in range(3):
        # (d x Hp)_k = d_{k+1} (Hp)_{k+2} - d_{k+2} (Hp)_{k+1}
        a, b = (k + 1) % 3, (k + 2) % 3
        row = np.zeros((len(p), 9))
        row[:, 3 * b : 3 * b + 3] = d[:, a : a + 1] * ph
        row[:, 3 * a : 3 * a + 3] = -d[:, b : b + 1] * ph
        rows.append(row)
    A = np.vstack(rows)
    _, sv, Vt = np.linalg.svd(A)
    if sv[-2] < 1e-10 * sv[0]:
        raise DegenerateConfigurationError("direction homography is not uniquely determined")
    Hn = Vt[-1].reshape(3, 3)
    H = Hn @ T
    # fix sign so that points lie in front along their directions
    if np.sum((ph @ Hn.T * d).sum(axis=1)) < 0:
        H = -H
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    R = np.column_stack([lam * h1, lam * h2, np.cross(lam * h1, lam * h2)])
    U, _, Vt = np.linalg.svd(R)
    R = U @ np.diag([1, 1, np.sign(np.linalg.det(U @ Vt))]) @ Vt
    return Pose(R, lam * h3)


def average_rotations(Rs) -> np.ndarray:
    """Chordal L2 mean of rotation matrices."""
    M = np.sum(np.asarray(Rs), axis=0)
    U, _, Vt = np.linalg.svd(M)
    return U @ np.diag([1, 1, np.sign(np.linalg.det(U @ Vt))]) @ Vt


def tangent_basis(directions) -> tuple[np.ndarray, np.ndarray]:
    """Two unit tangents per unit direction, mutually perpendicular, shape (N, 3) each."""
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    # cross with the coordinate axis least aligned with d
    axis = np.zeros_like(d)
    axis[np.arange(len(d)), np.argmin(np.abs(d), axis=1)] = 1.0
    t1 = np.cross(d, axis)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(d, t1)
    return t1, t2
