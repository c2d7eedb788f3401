"""Star calibration pattern geometry and a supersampling synthetic renderer.

Each square of the pattern holds a star of ``segment_count`` alternating
black/white angular segments around its center. Segment boundaries start at
angle 0 (the +x axis of pattern space) and the polarity of a square alternates
like a checkerboard, so for 4 segments the pattern is an ordinary checkerboard
with half-square cells.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import Pose
from .imaging import RasterImage

TWO_PI = 2.0 * np.pi


class OutOfPatternError(ValueError):
    """Point lies outside the square-grid extent of the pattern."""


@dataclass(frozen=True)
class StarPattern:
    segment_count: int = 16
    squares_x: int = 16
    squares_y: int = 12
    square_size: float = 1.0
    physical_square_size: float = 0.03
    fiducial_region: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        s = self.segment_count
        if s < 4 or s % 2:
            raise ValueError("segment_count must be an even integer >= 4")
        if s % 4:
            # opposite segments k and k + s/2 differ in parity, breaking point symmetry
            raise ValueError("segment_count must be a multiple of 4 for point-symmetric stars")
        if self.squares_x < 1 or self.squares_y < 1:
            raise ValueError("pattern needs at least one square")
        if self.square_size <= 0 or self.physical_square_size <= 0:
            raise ValueError("square sizes must be positive")
        object.__setattr__(
            self, "fiducial_region", frozenset((int(i), int(j)) for i, j in self.fiducial_region)
        )

    @property
    def extent(self) -> tuple[float, float]:
        return self.squares_x * self.square_size, self.squares_y * self.square_size

    def feature_indices(self) -> np.ndarray:
        """(N, 2) integer square indices of all star features, row-major."""
        jj, ii = np.mgrid[0 : self.squares_y, 0 : self.squares_x]
        idx = np.column_stack([ii.ravel(), jj.ravel()])
        if self.fiducial_region:
            keep = [tuple(p) not in self.fiducial_region for p in idx.tolist()]
            idx = idx[np.array(keep, dtype=bool)]
        return idx

    def feature_point(self, i: int, j: int) -> np.ndarray:
        h = self.square_size / 2
        return np.array([i * self.square_size + h, j * self.square_size + h])

    def feature_points(self, indices=None) -> np.ndarray:
        idx = self.feature_indices() if indices is None else np.asarray(indices).reshape(-1, 2)
        return (idx + 0.5) * self.square_size

    def has_feature(self, i: int, j: int) -> bool:
        return (
            0 <= i < self.squares_x
            and 0 <= j < self.squares_y
            and (i, j) not in self.fiducial_region
        )

    def inside(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        w, h = self.extent
        return (xy[..., 0] >= 0) & (xy[..., 1] >= 0) & (xy[..., 0] <= w) & (xy[..., 1] <= h)

    def intensity(self, xy) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized ideal binary intensity; returns ``(values, inside)``.

        Fiducial squares render white. Points outside the grid get 0 with
        ``inside == False``.
        """
        xy = np.asarray(xy, dtype=np.float64)
        x = xy[..., 0]
        y = xy[..., 1]
        inside = self.inside(xy)
        sq = self.square_size
        i = np.clip(np.floor(x / sq), 0, self.squares_x - 1).astype(np.int64)
        j = np.clip(np.floor(y / sq), 0, self.squares_y - 1).astype(np.int64)
        theta = np.arctan2(y - (j + 0.5) * sq, x - (i + 0.5) * sq)
        theta = np.where(theta < 0, theta + TWO_PI, theta)
        k = np.floor(self.segment_count * theta / TWO_PI).astype(np.int64)
        values = ((k + i + j) % 2).astype(np.float64)
        if self.fiducial_region:
            fid = np.zeros(x.shape, dtype=bool)
            for fi, fj in self.fiducial_region:
                fid |= (i == fi) & (j == fj)
            values = np.where(fid, 1.0, values)
        return np.where(inside, values, 0.0), inside

    def to_dict(self) -> dict:
        return {
            "segment_count": self.segment_count,
            "squares_x": self.squares_x,
            "squares_y": self.squares_y,
            "square_size": self.square_size,
            "physical_square_size": self.physical_square_size,
            "fiducial_region": sorted([list(p) for p in self.fiducial_region]),
        }

    @classmethod
    def from_dict(cls, d: dict) -> StarPattern:
        return cls(
            segment_count=int(d.get("segment_count", 16)),
            squares_x=int(d["squares_x"]),
            squares_y=int(d["squares_y"]),
            square_size=float(d.get("square_size", 1.0)),
            physical_square_size=float(d.get("physical_square_size", 0.03)),
            fiducial_region=frozenset(tuple(p) for p in d.get("fiducial_region", [])),
        )


def pattern_intensity(pattern: StarPattern, point) -> int:
    """Ideal value (0 black, 1 white) of the pattern at one pattern-space point."""
    xy = np.asarray(point, dtype=np.float64).reshape(1, 2)
    values, inside = pattern.intensity(xy)
    if not inside[0]:
        raise OutOfPatternError(f"point {tuple(xy[0])} outside the pattern extent")
    return int(values[0])


def load_pattern(path) -> StarPattern:
    return StarPattern.from_dict(json.loads(Path(path).read_text()))


def save_pattern(pattern: StarPattern, path) -> None:
    Path(path).write_text(json.dumps(pattern.to_dict(), indent=2) + "\n")


def default_pattern(
    segment_count: int = 16, square_size: float = 0.03, squares_x: int = 16, squares_y: int = 12
) -> StarPattern:
    """Star squares with a 2x2 fiducial block in the middle."""
    cx, cy = squares_x // 2 - 1, squares_y // 2 - 1
    return StarPattern(
        segment_count=segment_count,
        squares_x=squares_x,
        squares_y=squares_y,
        square_size=square_size,
        physical_square_size=square_size,
        fiducial_region=frozenset({(cx, cy), (cx + 1, cy), (cx, cy + 1), (cx + 1, cy + 1)}),
    )


@dataclass(eq=False)
class GroundTruthView:
    """A rendered view with the exact projections of its star centers."""

    image: RasterImage
    camera: object
    pose: Pose
    feature_indices: np.ndarray
    feature_positions: np.ndarray
    pattern: StarPattern
    camera_id: str = "camera0"

    @property
    def true_features(self) -> list[tuple[tuple[int, int], tuple[float, float]]]:
        return [
            ((int(i), int(j)), (float(x), float(y)))
            for (i, j), (x, y) in zip(self.feature_indices, self.feature_positions)
        ]

    def feature_lookup(self) -> dict[tuple[int, int], np.ndarray]:
        return {(int(i), int(j)): p for (i, j), p in zip(self.feature_indices, self.feature_positions)}

    def seed_correspondences(self, margin: float = 10.0) -> tuple[np.ndarray, np.ndarray]:
        """Four pattern<->image seeds standing in for a decoded fiducial.

        Uses the outer corners of the fiducial block when all four are visible,
        otherwise the 2x2 block of true features closest to the image center.
        """
        pat = self.pattern
        w, h = self.image.width, self.image.height
        if pat.fiducial_region:
            fi = np.array(sorted(pat.fiducial_region))
            lo = fi.min(axis=0) * pat.square_size
            hi = (fi.max(axis=0) + 1) * pat.square_size
            corners = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
            px, ok = project_pattern_points(self.camera, self.pose, corners)
            inside = ok & (px[:, 0] >= margin) & (px[:, 1] >= margin)
            inside &= (px[:, 0] <= w - 1 - margin) & (px[:, 1] <= h - 1 - margin)
            if np.all(inside):
                return corners, px
        lookup = self.feature_lookup()
        best = None
        center = np.array([(w - 1) / 2, (h - 1) / 2])
        for (i, j), p in lookup.items():
            block = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)]
            if all(b in lookup for b in block):
                d = np.linalg.norm(p - center)
                if best is None or d < best[0]:
                    best = (d, block)
        if best is None:
            return np.zeros((0, 2)), np.zeros((0, 2))
        block = best[1]
        return pat.feature_points(block), np.array([lookup[b] for b in block])

    def sidecar(self) -> dict:
        seeds_pat, seeds_img = self.seed_correspondences()
        return {
            "camera_id": self.camera_id,
            "pose": self.pose.to_dict(),
            "features": [[int(i), int(j), float(x), float(y)] for (i, j), (x, y) in self.true_features],
            "seeds": [[*map(float, a), *map(float, b)] for a, b in zip(seeds_pat, seeds_img)],
        }


def project_pattern_points(camera, pose: Pose, pattern_xy) -> tuple[np.ndarray, np.ndarray]:
    xy = np.asarray(pattern_xy, dtype=np.float64).reshape(-1, 2)
    pts = np.column_stack([xy, np.zeros(len(xy))])
    return camera.project(pose.apply(pts))


def _ray_plane_hits(camera, pose: Pose, px: np.ndarray):
    origins, dirs, ok = camera.unproject_lines(px)
    Rt = pose.R.T
    o = (origins - pose.t) @ Rt.T
    d = dirs @ Rt.T
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = -o[:, 2] / d[:, 2]
    hit = ok & np.isfinite(lam) & (lam > 0)
    xy = o[:, :2] + lam[:, None] * d[:, :2]
    return np.where(hit[:, None], xy, 0.0), hit


def render_synthetic(
    pattern: StarPattern,
    camera,
    pose: Pose,
    supersampling: int = 4,
    blur_sigma: float = 0.0,
    noise_sigma: float = 0.0,
    rng=None,
    margin: float = 10.0,
    background: float = 0.5,
    chunk_rows: int = 24,
) -> GroundTruthView:
    """Render ``pattern`` seen by ``camera`` at ``pose`` (pattern -> camera).

    Pixel values are box-filtered averages of ``supersampling**2`` ray
    samples, then optionally Gaussian-blurred and perturbed with clamped
    Gaussian noise. ``true_features`` lists star centers projecting at least
    ``margin`` px inside the image.
    """
    if supersampling < 1:
        raise ValueError("supersampling must be >= 1")
    # camera center in pattern coordinates; its height above the plane
    center_pattern = pose.inverse().apply(np.zeros((1, 3)))[0]
    if abs(center_pattern[2]) < 1e-9 * max(1.0, np.abs(pose.t).max()):
        raise ValueError("pattern plane passes through the projection center")
    width, height = camera.width, camera.height
    ss = supersampling
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    sub = np.column_stack([ox.ravel(), oy.ravel()])
    out = np.empty((height, width))
    xs = np.arange(width, dtype=np.float64)
    for r0 in range(0, height, chunk_rows):
        rows = np.arange(r0, min(r0 + chunk_rows, height), dtype=np.float64)
        gy, gx = np.meshgrid(rows, xs, indexing="ij")
        base = np.column_stack([gx.ravel(), gy.ravel()])
        px = (base[:, None, :] + sub[None, :, :]).reshape(-1, 2)
        xy, hit = _ray_plane_hits(camera, pose, px)
        values, inside = pattern.intensity(xy)
        values = np.where(hit & inside, values, background)
        out[r0 : r0 + len(rows)] = values.reshape(len(rows), width, ss * ss).mean(axis=2)
    if blur_sigma > 0:
        out = gaussian_filter(out, blur_sigma, mode="nearest")
    if noise_sigma > 0:
        rng = np.random.default_rng(rng)
        out = out + rng.normal(0.0, noise_sigma, out.shape)
    out = np.clip(out, 0.0, 1.0)

    idx = pattern.feature_indices()
    pos, ok = project_pattern_points(camera, pose, pattern.feature_points(idx))
    keep = ok & (pos[:, 0] >= margin) & (pos[:, 1] >= margin)
    keep &= (pos[:, 0] <= width - 1 - margin) & (pos[:, 1] <= height - 1 - margin)
    return GroundTruthView(
        image=RasterImage(out),
        camera=camera,
        pose=pose,
        feature_indices=idx[keep],
        feature_positions=pos[keep],
        pattern=pattern,
    )


def save_sidecar(view: GroundTruthView, path) -> None:
    Path(path).write_text(json.dumps(view.sidecar(), indent=1) + "\n")


def load_sidecar(path) -> dict:
    """Parse a sidecar into arrays: pose, feature indices/positions, seeds."""
    d = json.loads(Path(path).read_text())
    feats = np.array(d["features"], dtype=np.float64).reshape(-1, 4)
    seeds = np.array(d.get("seeds", []), dtype=np.float64).reshape(-1, 4)
    return {
        "camera_id": d.get("camera_id", "camera0"),
        "pose": Pose.from_dict(d["pose"]),
        "feature_indices": feats[:, :2].astype(np.int64),
        "feature_positions": feats[:, 2:],
        "seed_pattern": seeds[:, :2],
        "seed_image": seeds[:, 2:],
    }
