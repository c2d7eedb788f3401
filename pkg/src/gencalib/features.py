"""Star-center detection and subpixel refinement.

Detection grows outward from a few seed correspondences: every candidate is
predicted with a homography fitted to its nearest known features, validated
and coarsely aligned by matching against a rendering of the ideal pattern
(affine brightness model, negative contrast is rejected), and finally
localized by symmetry refinement: pattern-space points mirrored about the
star center must see the same image values.

Local homographies map *local* pattern coordinates, measured in squares and
centered on the feature, to image pixels. With ``H[2, 2] = 1`` the feature
position is therefore ``(H[0, 2], H[1, 2])``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import DegenerateConfigurationError, apply_homography, fit_homography
from .imaging import OutOfBoundsError, RasterImage
from .lm import DivergenceError, LMSettings, levenberg_marquardt
from .pattern import StarPattern

VARIANTS = ("intensity", "gradient-magnitude", "gradient-xy")
MATCH_SUPERSAMPLING = 4  # per axis, i.e. 16 samples per pixel
MAX_MATCH_RMS = 0.5
# symmetry refinement stops once the position moves less than this (px)
POSITION_TOLERANCE = 1e-4


class DegenerateVarianceError(ValueError):
    """The sampled image values have (almost) no variance."""


@dataclass(frozen=True)
class LocalHomography:
    H: np.ndarray

    def __post_init__(self):
        H = np.array(self.H, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(H)) or abs(H[2, 2]) < 1e-300:
            raise ValueError("homography must be finite with non-zero H[2, 2]")
        H = H / H[2, 2]
        if abs(np.linalg.det(H)) < 1e-12:
            raise ValueError("homography is singular")
        H.setflags(write=False)
        object.__setattr__(self, "H", H)

    @classmethod
    def from_params(cls, h) -> LocalHomography:
        return cls(np.append(np.asarray(h, dtype=np.float64), 1.0).reshape(3, 3))

    @property
    def params(self) -> np.ndarray:
        return self.H.reshape(-1)[:8].copy()

    @property
    def position(self) -> np.ndarray:
        return np.array([self.H[0, 2], self.H[1, 2]])

    def apply(self, pts) -> np.ndarray:
        return apply_homography(self.H, pts)

    def inverse_apply(self, pts) -> np.ndarray:
        return apply_homography(np.linalg.inv(self.H), pts)

    def translated(self, shift) -> LocalHomography:
        T = np.eye(3)
        T[:2, 2] = shift
        return LocalHomography(T @ self.H)


@dataclass(frozen=True)
class FeatureDetection:
    square_index: tuple[int, int]
    position: np.ndarray
    refined_homography: LocalHomography | None = None
    validated: bool = True


def local_homography(pattern: StarPattern, square_index, H_pattern) -> LocalHomography:
    """Convert a pattern->image homography into the local frame of one star."""
    i, j = square_index
    sq = pattern.square_size
    A = np.array([[sq, 0.0, (i + 0.5) * sq], [0.0, sq, (j + 0.5) * sq], [0.0, 0.0, 1.0]])
    return LocalHomography(np.asarray(H_pattern) @ A)


def feature_rng(square_index, seed: int = 0) -> np.random.Generator:
    i, j = square_index
    return np.random.default_rng([int(seed), int(i) + 1000, int(j) + 1000])


# ---------------------------------------------------------------------------
# affine brightness fit


def affine_brightness_init(p, q) -> tuple[float, float]:
    """Least-squares (f, b) minimizing sum (f p_i + b - q_i)^2."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    n = p.size
    if n < 2 or q.size != n:
        raise ValueError("p and q need the same length >= 2")
    sp, sq = p.sum(), q.sum()
    denom = (p * p).sum() - sp * sp / n
    if denom < 1e-12:
        raise DegenerateVarianceError("sampled intensities have no variance")
    f = ((q * p).sum() - sp * sq / n) / denom
    b = (sq - f * sp) / n
    return float(f), float(b)


# ---------------------------------------------------------------------------
# sample sets


def _window_bounds(center, window: int):
    half = window // 2
    c = np.round(np.asarray(center, dtype=np.float64))
    return c - half - 0.5, c + half + 0.5


def _local_pattern_mask(pattern: StarPattern, square_index, local) -> np.ndarray:
    """Samples whose pattern point lies on the star grid (not fiducial, not outside)."""
    i, j = square_index
    sq = pattern.square_size
    xy = (local + [i + 0.5, j + 0.5]) * sq
    ok = pattern.inside(xy)
    if pattern.fiducial_region:
        si = np.floor(local[:, 0] + i + 0.5).astype(np.int64)
        sj = np.floor(local[:, 1] + j + 0.5).astype(np.int64)
        for fi, fj in pattern.fiducial_region:
            ok &= ~((si == fi) & (sj == fj))
    return ok


def symmetry_samples(
    H: LocalHomography,
    window: int,
    count: int,
    rng: np.random.Generator,
    pattern: StarPattern | None = None,
    square_index=(0, 0),
    grid_aligned: bool = False,
) -> np.ndarray:
    """Local pattern-space samples s_i such that H(s_i) and H(-s_i) fall in the window.

    Samples are uniform over the window's pattern-space footprint (rejection
    sampling in its bounding box). ``grid_aligned`` instead returns the
    pre-images of the window's pixel centers, for comparison experiments.
    """
    lo, hi = _window_bounds(H.position, window)
    if grid_aligned:
        g = np.arange(window) + lo[0] + 0.5
        h = np.arange(window) + lo[1] + 0.5
        gy, gx = np.meshgrid(h, g, indexing="ij")
        local = H.inverse_apply(np.column_stack([gx.ravel(), gy.ravel()]))
        keep = _mirror_in_window(H, local, lo, hi)
        if pattern is not None:
            keep &= _local_pattern_mask(pattern, square_index, local)
            keep &= _local_pattern_mask(pattern, square_index, -local)
        return local[keep]
    corners = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    fc = H.inverse_apply(corners)
    blo, bhi = fc.min(axis=0), fc.max(axis=0)
    out = []
    have = 0
    for _ in range(50):
        cand = rng.uniform(blo, bhi, size=(2 * count, 2))
        keep = _mirror_in_window(H, cand, lo, hi)
        if pattern is not None:
            keep &= _local_pattern_mask(pattern, square_index, cand)
            keep &= _local_pattern_mask(pattern, square_index, -cand)
        out.append(cand[keep])
        have += int(keep.sum())
        if have >= count:
            break
    return np.concatenate(out)[:count]


def _mirror_in_window(H: LocalHomography, local, lo, hi) -> np.ndarray:
    ok = np.ones(len(local), dtype=bool)
    for sgn in (1.0, -1.0):
        p = H.apply(sgn * local)
        ok &= np.all((p >= lo) & (p <= hi), axis=1)
    return ok


# ---------------------------------------------------------------------------
# symmetry refinement


def _homography_points(h, s):
    """Image points H(s) and the homogeneous scale w."""
    sx, sy = s[:, 0], s[:, 1]
    w = h[6] * sx + h[7] * sy + 1.0
    return np.column_stack([(h[0] * sx + h[1] * sy + h[2]) / w, (h[3] * sx + h[4] * sy + h[5]) / w]), w


def _chain_homography(dv, pts, w, s):
    """Jacobian (N*k, 8) of values with position derivatives dv (N, k, 2) w.r.t. H entries."""
    sx = s[:, 0:1]
    sy = s[:, 1:2]
    iw = (1.0 / w)[:, None]
    gx = dv[:, :, 0] * iw
    gy = dv[:, :, 1] * iw
    gp = -(gx * pts[:, 0:1] + gy * pts[:, 1:2])
    J = np.stack([gx * sx, gx * sy, gx, gy * sx, gy * sy, gy, gp * sx, gp * sy], axis=2)
    return J.reshape(-1, 8)


def sample_values(image: RasterImage, pts, variant: str, derivatives: bool = True):
    """Per-point values V (N, k) and their position derivatives (N, k, 2)."""
    x, y = pts[:, 0], pts[:, 1]
    if variant == "intensity" and not derivatives:
        v, ok = image.sample(x, y)
        return v[:, None], None, ok
    if variant == "intensity":
        v, gx, gy, ok = image.sample_with_gradient(x, y)
        return v[:, None], np.stack([gx, gy], axis=1)[:, None, :], ok
    if variant not in VARIANTS:
        raise ValueError(f"unknown refinement variant {variant!r}")
    vxp, dxp_x, dxp_y, ok1 = image.sample_with_gradient(x + 1, y)
    vxm, dxm_x, dxm_y, ok2 = image.sample_with_gradient(x - 1, y)
    vyp, dyp_x, dyp_y, ok3 = image.sample_with_gradient(x, y + 1)
    vym, dym_x, dym_y, ok4 = image.sample_with_gradient(x, y - 1)
    ok = ok1 & ok2 & ok3 & ok4
    g = np.column_stack([(vxp - vxm) / 2, (vyp - vym) / 2])
    dg = np.stack(
        [
            np.column_stack([(dxp_x - dxm_x) / 2, (dxp_y - dxm_y) / 2]),
            np.column_stack([(dyp_x - dym_x) / 2, (dyp_y - dym_y) / 2]),
        ],
        axis=1,
    )
    if variant == "gradient-xy":
        return g, dg, ok
    mag = np.linalg.norm(g, axis=1)
    safe = np.maximum(mag, 1e-12)
    dmag = np.einsum("nk,nkc->nc", g / safe[:, None], dg)
    return mag[:, None], dmag[:, None, :], ok


def symmetry_cost_terms(image: RasterImage, h, samples, variant: str = "intensity", jacobian: bool = False):
    """Residuals V(H s_i) - V(H(-s_i)) (flattened) and optionally their Jacobian.

    For the gradient-vector variant the mirrored gradient is negated first.
    """
    pa, wa = _homography_points(h, samples)
    pb, wb = _homography_points(h, -samples)
    va, da, oka = sample_values(image, pa, variant, jacobian)
    vb, db, okb = sample_values(image, pb, variant, jacobian)
    # gradients of a point-symmetric image flip sign under mirroring
    sign = 1.0 if variant == "gradient-xy" else -1.0
    r = (va + sign * vb).ravel()
    if not np.all(oka & okb):
        r = np.full(r.shape, np.nan)
    if not jacobian:
        return r
    J = _chain_homography(da, pa, wa, samples) + sign * _chain_homography(db, pb, wb, -samples)
    return r, J


def symmetry_cost(image: RasterImage, H: LocalHomography, samples, variant: str = "intensity") -> float:
    r = symmetry_cost_terms(image, H.params, samples, variant)
    return float(r @ r)


def refine_symmetry(
    image: RasterImage,
    window: int,
    H_init: LocalHomography,
    variant: str = "intensity",
    samples=None,
    rng=None,
    settings: LMSettings | None = None,
    pattern: StarPattern | None = None,
    square_index=(0, 0),
) -> tuple[LocalHomography, np.ndarray]:
    """Minimize the mirrored-sample cost over the 8 free homography entries.

    Returns the refined local homography and the feature position
    ``(H[0, 2], H[1, 2])``.
    """
    if samples is None:
        rng = rng if rng is not None else feature_rng(square_index)
        samples = symmetry_samples(H_init, window, 8 * window * window, rng, pattern, square_index)
    if len(samples) < 8:
        raise DegenerateVarianceError("too few symmetric samples inside the window")
    h0 = H_init.params
    r0 = symmetry_cost_terms(image, h0, samples, variant)
    if not np.all(np.isfinite(r0)):
        raise OutOfBoundsError("mirrored samples leave the image")

    def jac(h):
        return symmetry_cost_terms(image, h, samples, variant, jacobian=True)[1]

    # The cost barely constrains the linear part of H (shrinking it slowly
    # lowers the cost), so convergence is judged on the position entries.
    res = levenberg_marquardt(
        lambda h: symmetry_cost_terms(image, h, samples, variant),
        jac,
        h0,
        settings,
        step_converged=lambda dx: max(abs(dx[2]), abs(dx[5])) < POSITION_TOLERANCE,
    )
    H = LocalHomography.from_params(res.x)
    return H, H.position


# ---------------------------------------------------------------------------
# matching refinement


@dataclass
class MatchResult:
    accepted: bool
    position: np.ndarray
    shift: np.ndarray
    f: float
    b: float
    rms: float
    converged: bool


def matching_samples(H: LocalHomography, window: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = _window_bounds(H.position, window)
    return rng.uniform(lo, hi, size=(window * window, 2))


def render_pattern_samples(pattern: StarPattern, square_index, H: LocalHomography, pts, supersampling: int = MATCH_SUPERSAMPLING):
    """Ideal pattern values averaged over each sample's pixel footprint."""
    ss = supersampling
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    sub = np.column_stack([ox.ravel(), oy.ravel()])
    img = (pts[:, None, :] + sub[None, :, :]).reshape(-1, 2)
    local = H.inverse_apply(img)
    i, j = square_index
    xy = (local + [i + 0.5, j + 0.5]) * pattern.square_size
    vals, inside = pattern.intensity(xy)
    n = len(pts)
    inside = inside.reshape(n, -1).all(axis=1)
    return vals.reshape(n, -1).mean(axis=1), inside


def refine_matching(
    image: RasterImage,
    pattern: StarPattern,
    window: int,
    init: LocalHomography,
    square_index=(0, 0),
    rng=None,
    settings: LMSettings | None = None,
) -> MatchResult:
    """Align the rendered ideal pattern to the image under a shift and affine brightness."""
    rng = rng if rng is not None else feature_rng(square_index, seed=1)
    pts = matching_samples(init, window, rng)
    q, inside = render_pattern_samples(pattern, square_index, init, pts)
    pts, q = pts[inside], q[inside]
    pos0 = init.position
    fail = MatchResult(False, pos0, np.zeros(2), 0.0, 0.0, np.inf, False)
    if len(pts) < 16:
        return fail
    p0, ok = image.sample(pts[:, 0], pts[:, 1])
    if not ok.all():
        return fail
    try:
        f0, b0 = affine_brightness_init(p0, q)
    except DegenerateVarianceError:
        return fail

    def residual(z):
        p, ok = image.sample(pts[:, 0] + z[0], pts[:, 1] + z[1])
        r = z[2] * p + z[3] - q
        return r if ok.all() else np.full(r.shape, np.nan)

    def jac(z):
        p, gx, gy, _ = image.sample_with_gradient(pts[:, 0] + z[0], pts[:, 1] + z[1])
        return np.column_stack([z[2] * gx, z[2] * gy, p, np.ones_like(p)])

    try:
        res = levenberg_marquardt(residual, jac, np.array([0.0, 0.0, f0, b0]), settings)
    except DivergenceError:
        return MatchResult(False, pos0, np.zeros(2), f0, b0, np.inf, False)
    z = res.x
    rms = float(np.sqrt(res.cost / len(q)))
    ok = res.converged and z[2] > 0 and rms < MAX_MATCH_RMS
    return MatchResult(bool(ok), pos0 + z[:2], z[:2].copy(), float(z[2]), float(z[3]), rms, res.converged)


# ---------------------------------------------------------------------------
# detection by homography growing


@dataclass
class DetectionSettings:
    window: int = 21
    variant: str = "intensity"
    neighbors: int = 12
    seed: int = 0
    max_shift_squares: float = 0.3
    lm: LMSettings | None = None


def refine_feature(
    image: RasterImage,
    pattern: StarPattern,
    square_index,
    H: LocalHomography,
    settings: DetectionSettings,
) -> FeatureDetection | None:
    """Matching then symmetry refinement of one predicted feature."""
    half = settings.window // 2
    margin = half + 2
    pos = H.position
    if not image.contains(pos[0], pos[1], margin):
        return None
    m = refine_matching(image, pattern, settings.window, H, square_index, feature_rng(square_index, settings.seed + 1), settings.lm)
    if not m.accepted:
        return None
    # reject jumps to a neighboring star
    square_px = np.linalg.norm(H.H[:2, :2], axis=0).min()
    if np.linalg.norm(m.shift) > settings.max_shift_squares * square_px:
        return None
    Hm = H.translated(m.shift)
    if not image.contains(Hm.position[0], Hm.position[1], margin):
        return None
    try:
        Hs, p = refine_symmetry(
            image,
            settings.window,
            Hm,
            settings.variant,
            rng=feature_rng(square_index, settings.seed),
            settings=settings.lm,
            pattern=pattern,
            square_index=square_index,
        )
    except (OutOfBoundsError, DivergenceError, DegenerateVarianceError, ValueError):
        return None
    if np.linalg.norm(p - m.position) > 0.5 * settings.max_shift_squares * square_px:
        return None
    if not image.contains(p[0], p[1], half):
        return None
    return FeatureDetection((int(square_index[0]), int(square_index[1])), p, Hs, True)


def _neighbor_homography(pattern_pts, image_pts, target, k):
    d = np.linalg.norm(pattern_pts - target, axis=1)
    order = np.argsort(d, kind="stable")
    for n in (k, 2 * k, len(order)):
        sel = order[: max(4, n)]
        try:
            return fit_homography(pattern_pts[sel], image_pts[sel])
        except DegenerateConfigurationError:
            continue
    raise DegenerateConfigurationError("no non-degenerate neighborhood")


def detect_features(
    image: RasterImage,
    pattern: StarPattern,
    seeds_pattern,
    seeds_image,
    window: int = 21,
    variant: str = "intensity",
    settings: DetectionSettings | None = None,
) -> list[FeatureDetection]:
    """Grow validated detections outward from >= 4 seed correspondences.

    Returns detections sorted by square index; an empty list if the seeds are
    degenerate.
    """
    s = settings or DetectionSettings(window=window, variant=variant)
    sp = np.asarray(seeds_pattern, dtype=np.float64).reshape(-1, 2)
    si = np.asarray(seeds_image, dtype=np.float64).reshape(-1, 2)
    if len(sp) < 4 or len(sp) != len(si):
        return []
    try:
        fit_homography(sp, si)
    except DegenerateConfigurationError:
        return []
    sq = pattern.square_size
    found: dict[tuple[int, int], FeatureDetection] = {}
    tried: set[tuple[int, int]] = set()
    # initial candidates: features within 1.5 squares of any seed
    all_idx = [tuple(map(int, t)) for t in pattern.feature_indices()]
    centers = pattern.feature_points(all_idx)
    near = np.min(np.linalg.norm(centers[:, None, :] - sp[None, :, :], axis=2), axis=1) <= 1.5 * sq
    front = sorted(t for t, ok in zip(all_idx, near) if ok)
    while front:
        corr_p = [sp] + [pattern.feature_points([k]) for k in found]
        corr_i = [si] + [d.position[None, :] for d in found.values()]
        corr_p = np.concatenate(corr_p)
        corr_i = np.concatenate(corr_i)
        added = []
        for idx in front:
            tried.add(idx)
            target = pattern.feature_point(*idx)
            try:
                G = _neighbor_homography(corr_p, corr_i, target, s.neighbors)
                H = local_homography(pattern, idx, G)
            except (DegenerateConfigurationError, ValueError):
                continue
            det = refine_feature(image, pattern, idx, H, s)
            if det is not None:
                added.append(det)
        for det in added:
            found[det.square_index] = det
        nxt = set()
        for det in added:
            i, j = det.square_index
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    n = (i + di, j + dj)
                    if n not in tried and pattern.has_feature(*n):
                        nxt.add(n)
        front = sorted(nxt)
    return [found[k] for k in sorted(found)]


# ---------------------------------------------------------------------------
# detections file


def write_detections(path, detections_by_image: dict) -> None:
    """CSV with columns image_id, i, j, x, y."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "i", "j", "x", "y"])
        for image_id in sorted(detections_by_image):
            for d in detections_by_image[image_id]:
                w.writerow([image_id, d.square_index[0], d.square_index[1], repr(float(d.position[0])), repr(float(d.position[1]))])


def read_detections(path) -> dict[str, list[FeatureDetection]]:
    out: dict[str, list[FeatureDetection]] = {}
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            det = FeatureDetection((int(row["i"]), int(row["j"])), np.array([float(row["x"]), float(row["y"])]))
            out.setdefault(row["image_id"], []).append(det)
    return out
