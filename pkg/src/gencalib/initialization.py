"""Initial calibration: dense matches, image-triple selection, provisional
poses, localization of further images, and fitting the B-spline grid to a
per-pixel direction field.

Everything here assumes a central camera; a non-central model starts from
the central result with all line points at the origin.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.optimize import minimize_scalar

from .features import FeatureDetection
from .geometry import (
    DegenerateConfigurationError,
    Pose,
    apply_homography,
    average_rotations,
    fit_homography,
    pose_from_direction_homography,
    pose_from_homography,
    rotation_from_rotvec,
    rotvec_from_rotation,
    skew,
    tangent_basis,
)
from .lm import LMSettings, levenberg_marquardt
from .models.generic import CalibratedArea, CentralGenericModel, grid_size_for_resolution
from .pattern import StarPattern

# the calibrated area extends this many grid cells past the outermost features
AREA_MARGIN_CELLS = 0.5


class InsufficientDataError(ValueError):
    """Not enough images, detections or coverage for this step."""


class TooFewCorrespondencesError(InsufficientDataError):
    pass


# ---------------------------------------------------------------------------
# dense matches


@dataclass
class DenseMatchMap:
    """Per-pixel pattern coordinates (NaN where undefined), shape (H, W, 2)."""

    coords: np.ndarray

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.coords[..., 0])

    def count(self) -> int:
        return int(self.defined.sum())

    def at(self, px) -> np.ndarray:
        """Stored coordinate at the nearest pixel (NaN if undefined or outside)."""
        px = np.atleast_2d(np.asarray(px, dtype=np.float64))
        c = np.round(px).astype(np.int64)
        inside = (c[:, 0] >= 0) & (c[:, 1] >= 0) & (c[:, 0] < self.width) & (c[:, 1] < self.height)
        out = np.full((len(px), 2), np.nan)
        out[inside] = self.coords[c[inside, 1], c[inside, 0]]
        return out


def _detection_lookup(detections) -> dict[tuple[int, int], np.ndarray]:
    return {tuple(map(int, d.square_index)): np.asarray(d.position, dtype=np.float64) for d in detections}


def interpolate_dense_matches(detections: list[FeatureDetection], pattern: StarPattern, image_size) -> DenseMatchMap:
    """Fill every pixel covered by a square of four adjacent detections.

    Each square's four detections define a homography; pixels inside the
    image quadrilateral get their pattern coordinate through its inverse.
    """
    width, height = map(int, image_size)
    coords = np.full((height, width, 2), np.nan)
    lookup = _detection_lookup(detections)
    sq = pattern.square_size
    for i, j in sorted(lookup):
        corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)]
        if not all(c in lookup for c in corners):
            continue
        src = pattern.feature_points(corners)
        dst = np.array([lookup[c] for c in corners])
        try:
            H = fit_homography(src, dst)
            Hinv = np.linalg.inv(H)
        except (DegenerateConfigurationError, np.linalg.LinAlgError):
            continue
        x0, y0 = np.maximum(np.floor(dst.min(axis=0)).astype(int), 0)
        x1 = min(int(np.ceil(dst[:, 0].max())), width - 1)
        y1 = min(int(np.ceil(dst[:, 1].max())), height - 1)
        if x1 < x0 or y1 < y0:
            continue
        gy, gx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        px = np.column_stack([gx.ravel(), gy.ravel()]).astype(np.float64)
        w = Hinv[2, 0] * px[:, 0] + Hinv[2, 1] * px[:, 1] + Hinv[2, 2]
        pat = apply_homography(Hinv, px)
        lo = src[0]
        tol = 1e-9 * sq
        inside = (w * np.sign(Hinv[2, 2] + Hinv[2, 0] * dst[0, 0] + Hinv[2, 1] * dst[0, 1]) > 0)
        inside &= np.all((pat >= lo - tol) & (pat <= lo + sq + tol), axis=1)
        coords[gy.ravel()[inside], gx.ravel()[inside]] = pat[inside]
    return DenseMatchMap(coords)


def select_triple(maps: list[DenseMatchMap], max_triples: int = 500, seed: int = 0) -> tuple[tuple[int, int, int], int]:
    """Triple of images whose dense maps share the most defined pixels.

    All triples are scored when there are at most ``max_triples``; otherwise
    that many are sampled with a fixed seed.
    """
    n = len(maps)
    if n < 3:
        raise InsufficientDataError("need at least three images")
    masks = [m.defined.ravel() for m in maps]
    total = n * (n - 1) * (n - 2) // 6
    if total <= max_triples:
        triples = list(itertools.combinations(range(n), 3))
    else:
        rng = np.random.default_rng(seed)
        seen: set[tuple[int, int, int]] = set()
        while len(seen) < max_triples:
            seen.add(tuple(sorted(int(v) for v in rng.choice(n, 3, replace=False))))
        triples = sorted(seen)
    best, best_score = triples[0], -1
    for t in triples:
        score = int(np.count_nonzero(masks[t[0]] & masks[t[1]] & masks[t[2]]))
        if score > best_score:
            best, best_score = t, score
    return best, best_score


# ---------------------------------------------------------------------------
# per-pixel directions


class PerPixelDirections:
    """Accumulated unit observation directions per pixel (central camera)."""

    def __init__(self, width: int, height: int):
        self.width = int(width)
        self.height = int(height)
        self.sums = np.zeros((self.height, self.width, 3))
        self.counts = np.zeros((self.height, self.width), dtype=np.int64)

    @property
    def defined(self) -> np.ndarray:
        return self.counts > 0

    @property
    def directions(self) -> np.ndarray:
        n = np.linalg.norm(self.sums, axis=2, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            d = self.sums / n
        d[~self.defined] = np.nan
        return d

    def add_view(self, dense: DenseMatchMap, pose: Pose) -> int:
        """Back-project a view's dense matches through its pose; returns pixel count."""
        m = dense.defined
        xy = dense.coords[m]
        X = pose.apply(np.column_stack([xy, np.zeros(len(xy))]))
        d = X / np.linalg.norm(X, axis=1, keepdims=True)
        self.sums[m] += d
        self.counts[m] += 1
        return int(m.sum())

    def add_directions(self, mask: np.ndarray, dirs: np.ndarray) -> None:
        self.sums[mask] += dirs
        self.counts[mask] += 1

    def unproject_lines(self, px):
        """Bilinear interpolation of the normalized field; valid only where all four neighbors are defined."""
        px = np.atleast_2d(np.asarray(px, dtype=np.float64))
        x0 = np.floor(px[:, 0]).astype(np.int64)
        y0 = np.floor(px[:, 1]).astype(np.int64)
        ok = (x0 >= 0) & (y0 >= 0) & (x0 < self.width - 1) & (y0 < self.height - 1)
        x0c = np.clip(x0, 0, self.width - 2)
        y0c = np.clip(y0, 0, self.height - 2)
        fx = (px[:, 0] - x0c)[:, None]
        fy = (px[:, 1] - y0c)[:, None]
        D = self.directions
        a, b = D[y0c, x0c], D[y0c, x0c + 1]
        c, e = D[y0c + 1, x0c], D[y0c + 1, x0c + 1]
        d = (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + e * fx) * fy
        ok &= np.all(np.isfinite(d), axis=1)
        d = np.where(ok[:, None], d, 0.0)
        n = np.linalg.norm(d, axis=1, keepdims=True)
        d = np.where(ok[:, None], d / np.where(n > 0, n, 1.0), 0.0)
        return np.zeros_like(d), d, ok


# ---------------------------------------------------------------------------
# provisional pinhole and triple poses


def _pinhole_reprojection_error(f, homographies, observations, cx, cy) -> float:
    K = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
    total = 0.0
    count = 0
    for H, (pat, img) in zip(homographies, observations):
        pose = pose_from_homography(H, K)
        X = pose.apply(np.column_stack([pat, np.zeros(len(pat))]))
        if np.any(X[:, 2] <= 0):
            return np.inf
        px = X[:, :2] / X[:, 2:] * f + [cx, cy]
        total += float(((px - img) ** 2).sum())
        count += len(pat)
    return total / max(count, 1)


def estimate_focal(homographies, observations, width: int, height: int) -> float:
    """Coarse 1D focal-length search (principal point at the image center)."""
    cx, cy = (width - 1) / 2, (height - 1) / 2
    scale = max(width, height)
    grid = scale * np.geomspace(0.2, 5.0, 60)
    errs = np.array([_pinhole_reprojection_error(f, homographies, observations, cx, cy) for f in grid])
    if not np.any(np.isfinite(errs)):
        raise DegenerateConfigurationError("no focal length gives a valid pose")
    k = int(np.nanargmin(errs))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(
        lambda f: _pinhole_reprojection_error(f, homographies, observations, cx, cy),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": 1e-3 * scale},
    )
    return float(res.x)


def _pattern_observations(detections, pattern: StarPattern):
    lookup = _detection_lookup(detections)
    keys = sorted(lookup)
    pat = pattern.feature_points(keys) if keys else np.zeros((0, 2))
    img = np.array([lookup[k] for k in keys]).reshape(-1, 2)
    return pat, img


@dataclass
class TripleInit:
    poses: list[Pose]
    focal: float
    per_pixel: PerPixelDirections


def init_poses(
    detections: list[list[FeatureDetection]],
    dense_maps: list[DenseMatchMap],
    pattern: StarPattern,
    width: int,
    height: int,
    min_features: int = 20,
) -> TripleInit:
    """Poses of the triple under a provisional pinhole, plus their per-pixel directions."""
    homs = []
    obs = []
    for dets in detections:
        pat, img = _pattern_observations(dets, pattern)
        if len(pat) < min_features:
            raise InsufficientDataError(f"need >= {min_features} features per image, got {len(pat)}")
        span = np.linalg.svd(pat - pat.mean(axis=0), compute_uv=False)
        if span[-1] < 1e-6 * span[0]:
            raise DegenerateConfigurationError("features are collinear")
        homs.append(fit_homography(pat, img))
        obs.append((pat, img))
    f = estimate_focal(homs, obs, width, height)
    K = np.array([[f, 0, (width - 1) / 2], [0, f, (height - 1) / 2], [0, 0, 1.0]])
    poses = [pose_from_homography(H, K) for H in homs]
    per_pixel = PerPixelDirections(width, height)
    for dense, pose in zip(dense_maps, poses):
        if abs(pose.inverse().t[2]) < 1e-9:
            raise DegenerateConfigurationError("pattern plane passes through the provisional center")
        per_pixel.add_view(dense, pose)
    return TripleInit(poses, f, per_pixel)


# ---------------------------------------------------------------------------
# localization


def _plane_frame(points: np.ndarray):
    """Rigid transform mapping (near-)planar points to z ~ 0, or None if not planar."""
    c = points.mean(axis=0)
    _, s, Vt = np.linalg.svd(points - c)
    if s[2] > 1e-2 * s[0]:
        return None
    R = Vt.copy()
    if np.linalg.det(R) < 0:
        R[2] *= -1
    return Pose(R, -R @ c)


def _linear_pose(points, dirs) -> Pose:
    frame = _plane_frame(points)
    if frame is not None:
        local = frame.apply(points)
        P = pose_from_direction_homography(local[:, :2], dirs)
        return P.compose(frame)
    # general configuration: d x (R X + t) = 0 for the 12 entries of [R | t]
    Xh = np.column_stack([points, np.ones(len(points))])
    rows = []
    for k in range(3):
        a, b = (k + 1) % 3, (k + 2) % 3
        row = np.zeros((len(points), 12))
        row[:, 4 * b : 4 * b + 4] = dirs[:, a : a + 1] * Xh
        row[:, 4 * a : 4 * a + 4] = -dirs[:, b : b + 1] * Xh
        rows.append(row)
    _, sv, Vt = np.linalg.svd(np.vstack(rows))
    P = Vt[-1].reshape(3, 4)
    if np.sum((Xh @ P.T * dirs).sum(axis=1)) < 0:
        P = -P
    U, s, Vt2 = np.linalg.svd(P[:, :3])
    R = U @ np.diag([1, 1, np.sign(np.linalg.det(U @ Vt2))]) @ Vt2
    return Pose(R, P[:, 3] / s.mean())


def _pose_vector(pose: Pose) -> np.ndarray:
    return np.concatenate([pose.rotvec(), pose.t])


def _pose_from_vector(x) -> Pose:
    return Pose(rotation_from_rotvec(x[:3]), x[3:6].copy())


def _pose_update(x, dx):
    R = rotation_from_rotvec(dx[:3]) @ rotation_from_rotvec(x[:3])
    return np.concatenate([rotvec_from_rotation(R), x[3:6] + dx[3:6]])


def direction_residuals(pose: Pose, points, origins, dirs, jacobian: bool = False):
    """Chordal mismatch normalize(R X + t - o) - d, flattened, with optional (3N, 6) Jacobian."""
    RX = points @ pose.R.T
    v = RX + pose.t - origins
    n = np.linalg.norm(v, axis=1, keepdims=True)
    m = v / n
    r = (m - dirs).ravel()
    if not jacobian:
        return r
    P = (np.eye(3)[None] - m[:, :, None] * m[:, None, :]) / n[:, :, None]
    J = np.zeros((len(points), 3, 6))
    J[:, :, :3] = -np.einsum("nij,njk->nik", P, skew_batch(RX))
    J[:, :, 3:] = P
    return r, J.reshape(-1, 6)


def skew_batch(v: np.ndarray) -> np.ndarray:
    S = np.zeros((len(v), 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -v[:, 2], v[:, 1]
    S[:, 1, 0], S[:, 1, 2] = v[:, 2], -v[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -v[:, 1], v[:, 0]
    return S


def localize_image(
    model,
    pixels,
    points,
    initial: Pose | None = None,
    settings: LMSettings | None = None,
) -> Pose:
    """Pose (pattern -> camera) from pixel observations of known 3D points.

    ``model`` provides ``unproject_lines(px) -> (origins, dirs, valid)``.
    Starts from a direction-based linear solve unless ``initial`` is given,
    then minimizes the chordal direction mismatch with LM.
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if X.shape[1] == 2:
        X = np.column_stack([X, np.zeros(len(X))])
    origins, dirs, ok = model.unproject_lines(px)
    origins, dirs, X = origins[ok], dirs[ok], X[ok]
    if len(X) < 6:
        raise TooFewCorrespondencesError(f"need >= 6 correspondences with valid directions, got {len(X)}")
    pose0 = initial if initial is not None else _linear_pose(X, dirs)

    def res(x):
        return direction_residuals(_pose_from_vector(x), X, origins, dirs)

    def jac(x):
        return direction_residuals(_pose_from_vector(x), X, origins, dirs, jacobian=True)[1]

    result = levenberg_marquardt(res, jac, _pose_vector(pose0), settings, update=_pose_update)
    return _pose_from_vector(result.x)


def relative_pattern_pose(poses_a: list[Pose], poses_b: list[Pose]) -> Pose:
    """Pose of pattern B in pattern A's frame from images that see both."""
    if not poses_a or len(poses_a) != len(poses_b):
        raise InsufficientDataError("need paired poses of both patterns")
    rel = [a.inverse().compose(b) for a, b in zip(poses_a, poses_b)]
    R = average_rotations([p.R for p in rel])
    t = np.mean([p.t for p in rel], axis=0)
    return Pose(R, t)


# ---------------------------------------------------------------------------
# grid fitting


def _fill_from_neighbors(values: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Propagate directions into unknown grid cells by averaging known 8-neighbors."""
    values = values.copy()
    known = known.copy()
    h, w = known.shape
    while not known.all():
        acc = np.zeros_like(values)
        cnt = np.zeros((h, w))
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dx == 0 and dy == 0:
                    continue
                src = np.zeros_like(known)
                ys = slice(max(dy, 0), h + min(dy, 0))
                xs = slice(max(dx, 0), w + min(dx, 0))
                yd = slice(max(-dy, 0), h + min(-dy, 0))
                xd = slice(max(-dx, 0), w + min(-dx, 0))
                src[yd, xd] = known[ys, xs]
                shifted = np.zeros_like(values)
                shifted[yd, xd] = values[ys, xs]
                acc += np.where(src[..., None], shifted, 0.0)
                cnt += src
        new = (~known) & (cnt > 0)
        if not new.any():
            raise InsufficientDataError("no defined directions to propagate")
        avg = acc[new] / cnt[new][:, None]
        values[new] = avg / np.linalg.norm(avg, axis=1, keepdims=True)
        known |= new
    return values


def _directions_update(dirs: np.ndarray, active: np.ndarray):
    def update(x, dx):
        g = x.reshape(-1, 3)
        t1, t2 = tangent_basis(g[active])
        out = g.copy()
        step = dx.reshape(-1, 2)
        v = g[active] + step[:, :1] * t1 + step[:, 1:] * t2
        out[active] = v / np.linalg.norm(v, axis=1, keepdims=True)
        return out.ravel()

    return update


def fit_grid_to_perpixel(
    per_pixel: PerPixelDirections,
    px_per_cell: float,
    area: CalibratedArea | None = None,
    stride: int | None = None,
    settings: LMSettings | None = None,
    min_coverage: float = 0.5,
    smoothness: float = 0.1,
) -> CentralGenericModel:
    """Fit a central B-spline grid to the per-pixel direction field.

    A weak second-difference penalty of weight ``smoothness`` on neighboring
    control values keeps sparsely sampled grid regions from folding.
    """
    defined = per_pixel.defined
    ys, xs = np.nonzero(defined)
    if len(xs) == 0:
        raise InsufficientDataError("per-pixel field is empty")
    if area is None:
        area = CalibratedArea(float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()))
    x0, y0 = int(np.ceil(area.min_x)), int(np.ceil(area.min_y))
    x1, y1 = int(np.floor(area.max_x)), int(np.floor(area.max_y))
    x1, y1 = min(x1, per_pixel.width - 1), min(y1, per_pixel.height - 1)
    window = defined[y0 : y1 + 1, x0 : x1 + 1]
    coverage = window.mean() if window.size else 0.0
    if coverage < min_coverage:
        raise InsufficientDataError(f"per-pixel field covers {coverage:.0%} of the area, need {min_coverage:.0%}")
    gw, gh = grid_size_for_resolution(area, px_per_cell)
    D = per_pixel.directions

    # initial control values from the nearest defined pixel
    template = CentralGenericModel(area, np.tile([0.0, 0.0, 1.0], (gh, gw, 1)), per_pixel.width, per_pixel.height)
    cpp = template.control_point_pixels().reshape(-1, 2)
    _, (iy, ix) = ndimage.distance_transform_edt(~defined, return_indices=True)
    c = np.round(cpp).astype(np.int64)
    c[:, 0] = np.clip(c[:, 0], 0, per_pixel.width - 1)
    c[:, 1] = np.clip(c[:, 1], 0, per_pixel.height - 1)
    ny, nx = iy[c[:, 1], c[:, 0]], ix[c[:, 1], c[:, 0]]
    dist = np.hypot(nx - cpp[:, 0], ny - cpp[:, 1])
    cell = max(area.size[0] / (gw - 3), area.size[1] / (gh - 3))
    known = (dist <= cell).reshape(gh, gw)
    init = D[ny, nx].reshape(gh, gw, 3)
    init = _fill_from_neighbors(np.where(known[..., None], init, 0.0), known)

    # pixel samples
    stride = stride or max(1, int(round(px_per_cell / 3)))
    sy, sx = np.mgrid[y0 : y1 + 1 : stride, x0 : x1 + 1 : stride]
    sel = defined[sy, sx]
    px = np.column_stack([sx[sel], sy[sel]]).astype(np.float64)
    target = D[sy[sel], sx[sel]]
    it = template.interpolate(px)
    idx, w = it.idx, it.w
    M = gw * gh
    active = np.ones(M, dtype=bool)
    col_of = np.arange(M)
    N = len(px)
    # second differences along rows and columns: (left, middle, right) indices
    grid = np.arange(M).reshape(gh, gw)
    triples = np.concatenate(
        [
            np.stack([grid[:, :-2], grid[:, 1:-1], grid[:, 2:]], axis=-1).reshape(-1, 3),
            np.stack([grid[:-2], grid[1:-1], grid[2:]], axis=-1).reshape(-1, 3),
        ]
    )
    # weight per sample so the penalty stays weak wherever pixels are dense
    reg = smoothness * np.sqrt(N / max(len(triples), 1)) * stride / px_per_cell

    def directions_of(x):
        g = x.reshape(-1, 3)
        raw = np.einsum("nk,nkc->nc", w, g[idx])
        nrm = np.linalg.norm(raw, axis=1, keepdims=True)
        return raw / nrm, nrm

    def residual(x):
        d, _ = directions_of(x)
        g = x.reshape(-1, 3)
        curv = reg * (g[triples[:, 0]] - 2.0 * g[triples[:, 1]] + g[triples[:, 2]])
        return np.concatenate([(d - target).ravel(), curv.ravel()])

    def jacobian(x):
        g = x.reshape(-1, 3)
        d, nrm = directions_of(x)
        P = (np.eye(3)[None] - d[:, :, None] * d[:, None, :]) / nrm[:, :, None]
        t1, t2 = tangent_basis(g)
        T = np.stack([t1, t2], axis=2)  # (M, 3, 2)
        # block for sample n, control k: w_nk * P_n @ T_k
        blocks = np.einsum("nij,nkjl->nkil", P, T[idx]) * w[:, :, None, None]
        cols = col_of[idx]
        rows = np.arange(N)[:, None, None, None] * 3 + np.arange(3)[None, None, :, None]
        rr = np.broadcast_to(rows, blocks.shape)
        cc = cols[:, :, None, None] * 2 + np.arange(2)[None, None, None, :]
        cc = np.broadcast_to(cc, blocks.shape)
        keep = np.broadcast_to((cols >= 0)[:, :, None, None], blocks.shape)
        # penalty rows: coefficient * reg * T_k for each member of a triple
        coef = np.array([1.0, -2.0, 1.0]) * reg
        rb = coef[None, :, None, None] * T[triples]  # (triple, member, 3, 2)
        rrow = 3 * N + np.arange(len(triples))[:, None, None, None] * 3 + np.arange(3)[None, None, :, None]
        rcol = triples[:, :, None, None] * 2 + np.arange(2)[None, None, None, :]
        rrow = np.broadcast_to(rrow, rb.shape)
        rcol = np.broadcast_to(rcol, rb.shape)
        data = np.concatenate([blocks[keep], rb.ravel()])
        rows_all = np.concatenate([rr[keep], rrow.ravel()])
        cols_all = np.concatenate([cc[keep], rcol.ravel()])
        return sp.csr_matrix((data, (rows_all, cols_all)), shape=(3 * (N + len(triples)), 2 * M))

    settings = settings or LMSettings(max_iterations=30)
    res = levenberg_marquardt(residual, jacobian, init.ravel(), settings, update=_directions_update(init, active))
    return CentralGenericModel(area, res.x.reshape(gh, gw, 3), per_pixel.width, per_pixel.height)


# ---------------------------------------------------------------------------
# full central initialization


@dataclass
class InitializationResult:
    model: CentralGenericModel
    poses: dict
    triple: tuple
    focal: float
    per_pixel: PerPixelDirections
    unlocalized: list


def initialize_calibration(
    detections: dict,
    pattern: StarPattern,
    width: int,
    height: int,
    px_per_cell: float = 10.0,
    area: CalibratedArea | None = None,
    seed: int = 0,
    min_matches: int = 6,
) -> InitializationResult:
    """Dense matches -> triple -> per-pixel field -> grid fit -> poses of all images."""
    ids = sorted(detections)
    maps = {k: interpolate_dense_matches(detections[k], pattern, (width, height)) for k in ids}
    usable = [k for k in ids if maps[k].count() > 0]
    t, _ = select_triple([maps[k] for k in usable], seed=seed)
    triple = tuple(usable[i] for i in t)
    tri = init_poses([detections[k] for k in triple], [maps[k] for k in triple], pattern, width, height)
    per_pixel = tri.per_pixel
    poses = dict(zip(triple, tri.poses))

    pending = [k for k in ids if k not in poses]
    progress = True
    while pending and progress:
        progress = False
        # localize the image with the most directions available first
        scored = []
        for k in pending:
            pat, img = _pattern_observations(detections[k], pattern)
            _, _, ok = per_pixel.unproject_lines(img)
            scored.append((int(ok.sum()), k))
        scored.sort(key=lambda s: (-s[0], str(s[1])))
        for n_ok, k in scored:
            if n_ok < min_matches:
                continue
            pat, img = _pattern_observations(detections[k], pattern)
            try:
                pose = localize_image(per_pixel, img, pat)
            except (InsufficientDataError, DegenerateConfigurationError, RuntimeError):
                continue
            poses[k] = pose
            per_pixel.add_view(maps[k], pose)
            pending.remove(k)
            progress = True
            break

    if area is None:
        allpx = np.concatenate([_pattern_observations(detections[k], pattern)[1] for k in ids])
        # margin so projections of the outermost features do not hit the boundary
        area = CalibratedArea.bounding(allpx, AREA_MARGIN_CELLS * px_per_cell, width, height)
    model = fit_grid_to_perpixel(per_pixel, px_per_cell, area)

    refined = {}
    for k in ids:
        pat, img = _pattern_observations(detections[k], pattern)
        try:
            refined[k] = localize_image(model, img, pat, initial=poses.get(k))
        except (InsufficientDataError, DegenerateConfigurationError, RuntimeError):
            continue
    unloc = [k for k in ids if k not in refined]
    return InitializationResult(model, refined, triple, tri.focal, per_pixel, unloc)
