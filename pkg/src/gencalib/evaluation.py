"""Calibration quality measures and downstream bias calculators.

Reprojection statistics, the biasedness metric (per-cell KL divergence of
normalized error vectors against a standard 2D normal), error-direction
maps, stereo depth bias and the pose-bias experiment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb
from scipy.spatial import cKDTree

from .geometry import DegenerateConfigurationError
from .initialization import InsufficientDataError, localize_image

MEAN_NORMAL_NORM = np.sqrt(np.pi / 2.0)  # E|x| for x ~ N(0, I_2)
EIGENVALUE_FLOOR = 1e-8


class EmptyFieldError(ValueError):
    """No error vectors to evaluate."""


class NoQualifyingCellsError(ValueError):
    """No grid cell holds enough error vectors for the biasedness metric."""


class DegenerateStereoError(ValueError):
    """Disparity plus error is not positive."""


# reprojection statistics -----------------------------------------------------


def median_norm(vectors) -> float:
    v = np.asarray(vectors, dtype=np.float64).reshape(-1, 2)
    if len(v) == 0:
        raise EmptyFieldError("no error vectors")
    return float(np.median(np.linalg.norm(v, axis=1)))


def reprojection_stats(train_vectors, test_vectors) -> tuple[float, float]:
    """Median error norms of the train and test sets."""
    return median_norm(train_vectors), median_norm(test_vectors)


# biasedness ------------------------------------------------------------------


def gaussian_kl_to_standard(mu, cov) -> float:
    """KL(N(mu, cov) || N(0, I)) in 2D, with eigenvalues floored."""
    mu = np.asarray(mu, dtype=np.float64)
    evals = np.linalg.eigvalsh(np.asarray(cov, dtype=np.float64))
    evals = np.maximum(evals, EIGENVALUE_FLOOR)
    return float(0.5 * (evals.sum() + mu @ mu - 2.0 - np.log(evals).sum()))


def cell_kl(vectors) -> float:
    """KL divergence of one cell's error vectors after mean-norm normalization."""
    v = np.asarray(vectors, dtype=np.float64)
    mean_norm = np.linalg.norm(v, axis=1).mean()
    if mean_norm > 0:
        v = v * (MEAN_NORMAL_NORM / mean_norm)
    mu = v.mean(axis=0)
    d = v - mu
    cov = d.T @ d / len(v)
    return gaussian_kl_to_standard(mu, cov)


def biasedness_cells(pixels, vectors, area, grid=(50, 50), min_samples: int = 20):
    """Per-cell KL values (NaN for cells with fewer than ``min_samples``), shape (rows, cols).

    ``area`` is ``(min_x, min_y, max_x, max_y)`` or an object with those fields;
    ``grid`` is ``(cols, rows)``.
    """
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    vec = np.asarray(vectors, dtype=np.float64).reshape(-1, 2)
    if len(px) == 0:
        raise EmptyFieldError("no error vectors")
    if hasattr(area, "min_x"):
        area = (area.min_x, area.min_y, area.max_x, area.max_y)
    x0, y0, x1, y1 = map(float, area)
    cols, rows = grid
    cx = np.clip(((px[:, 0] - x0) / max(x1 - x0, 1e-12) * cols).astype(int), 0, cols - 1)
    cy = np.clip(((px[:, 1] - y0) / max(y1 - y0, 1e-12) * rows).astype(int), 0, rows - 1)
    cell = cy * cols + cx
    out = np.full(rows * cols, np.nan)
    order = np.argsort(cell, kind="stable")
    cells, starts, counts = np.unique(cell[order], return_index=True, return_counts=True)
    for c, s, n in zip(cells, starts, counts):
        if n >= min_samples:
            out[c] = cell_kl(vec[order[s : s + n]])
    return out.reshape(rows, cols)


def biasedness(pixels, vectors, area, grid=(50, 50), min_samples: int = 20) -> float:
    """Median per-cell KL divergence over cells with at least ``min_samples`` vectors."""
    kl = biasedness_cells(pixels, vectors, area, grid, min_samples)
    ok = np.isfinite(kl)
    if not ok.any():
        raise NoQualifyingCellsError(f"no cell holds {min_samples} or more error vectors")
    return float(np.median(kl[ok]))


# error-direction maps --------------------------------------------------------


def nearest_observation_map(pixels, width: int, height: int) -> np.ndarray:
    """Index of the nearest observation for every pixel center, shape (height, width)."""
    pts = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise EmptyFieldError("no observations")
    gy, gx = np.mgrid[0:height, 0:width]
    q = np.column_stack([gx.ravel(), gy.ravel()]).astype(np.float64)
    _, idx = cKDTree(pts).query(q)
    return idx.reshape(height, width)


def direction_colors(vectors) -> np.ndarray:
    """Fully saturated hue-wheel colors for 2D vectors, (N, 3) RGB in [0, 1]."""
    v = np.asarray(vectors, dtype=np.float64).reshape(-1, 2)
    hue = np.mod(np.arctan2(v[:, 1], v[:, 0]), 2 * np.pi) / (2 * np.pi)
    hsv = np.column_stack([hue, np.ones(len(v)), np.ones(len(v))])
    return hsv_to_rgb(hsv)


def error_direction_map(pixels, vectors, width: int, height: int) -> np.ndarray:
    """(height, width, 3) RGB image; each pixel shows the direction color of
    the nearest observation's error vector."""
    idx = nearest_observation_map(pixels, width, height)
    return direction_colors(vectors)[idx]


def direction_legend(size: int = 64) -> np.ndarray:
    """Color wheel legend, (size, size, 3) RGB, white outside the disk."""
    c = (size - 1) / 2
    gy, gx = np.mgrid[0:size, 0:size]
    v = np.column_stack([(gx - c).ravel(), (gy - c).ravel()])
    rgb = direction_colors(v).reshape(size, size, 3)
    rgb[np.hypot(gx - c, gy - c) > c] = 1.0
    return rgb


# stereo depth bias -----------------------------------------------------------


@dataclass(frozen=True)
class StereoBiasConfig:
    baseline: float
    focal: float
    depth: float
    disparity_error: float

    def __post_init__(self):
        if self.baseline <= 0 or self.focal <= 0 or self.depth <= 0:
            raise ValueError("baseline, focal length and depth must be positive")


def stereo_depth_bias(cfg: StereoBiasConfig) -> float:
    """Depth error ``d - bf / (bf/d + dx)`` in meters."""
    bf = cfg.baseline * cfg.focal
    disparity = bf / cfg.depth + cfg.disparity_error
    if disparity <= 0:
        raise DegenerateStereoError("disparity plus error must be positive")
    return cfg.depth - bf / disparity


# pose bias -------------------------------------------------------------------


@dataclass
class PoseBiasResult:
    median_error: float
    errors: np.ndarray
    failures: int


def sample_pose_bias_points(model, area, n_points: int, depth_range, rng: np.random.Generator):
    """Random pixels in ``area`` and 3D points on their lines at random distances."""
    lo = np.array([area.min_x, area.min_y])
    hi = np.array([area.max_x, area.max_y])
    px = rng.uniform(lo, hi, size=(n_points, 2))
    o, d, ok = model.unproject_lines(px)
    depth = rng.uniform(depth_range[0], depth_range[1], size=n_points)
    return px, o + d * depth[:, None], ok


def pose_bias_experiment(
    model_gt,
    model_test,
    n_points: int = 15,
    depth_range=(1.5, 2.5),
    trials: int = 100,
    seed: int = 0,
    area=None,
) -> PoseBiasResult:
    """Camera-center error from localizing ``model_gt`` observations with ``model_test``.

    The true camera sits at the origin with identity rotation, so the error of
    a localized pose is the norm of its camera center.
    """
    area = area or model_gt.area
    rng = np.random.default_rng(seed)
    errors = []
    failures = 0
    for _ in range(trials):
        px, X, ok = sample_pose_bias_points(model_gt, area, n_points, depth_range, rng)
        if ok.sum() < 6:
            failures += 1
            continue
        try:
            pose = localize_image(model_test, px[ok], X[ok])
        except (InsufficientDataError, DegenerateConfigurationError, RuntimeError):
            failures += 1
            continue
        errors.append(np.linalg.norm(pose.center()))
    errors = np.asarray(errors)
    med = float(np.median(errors)) if errors.size else float("nan")
    return PoseBiasResult(med, errors, failures)
