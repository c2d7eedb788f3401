"""End-to-end calibration: detect, initialize, bundle-adjust, scale, evaluate."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .ba import BundleAdjustmentConfig, CalibrationProblem, apply_metric_scale, bundle_adjust, evaluate_residuals
from .features import DetectionSettings, FeatureDetection, detect_features
from .geometry import DegenerateConfigurationError, Pose
from .initialization import (
    InitializationResult,
    InsufficientDataError,
    initialize_calibration,
    localize_image,
)
from .lm import LMSettings
from .models.fitting import fit_parametric_to_generic
from .models.generic import CentralGenericModel, NoncentralGenericModel
from .models.parametric import PARAMETRIC_KINDS
from .pattern import GroundTruthView, StarPattern

MODEL_KINDS = ("central-generic", "noncentral-generic", *PARAMETRIC_KINDS)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class CalibrationSettings:
    model: str = "central-generic"
    px_per_cell: float = 10.0
    window: int = 21
    variant: str = "intensity"
    test_every: int = 10
    seed: int = 0
    spline_points: int = 250
    jacobian: str = "implicit"
    ba_iterations: int = 50
    physical_square_size: float | None = None

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model!r}; choose from {', '.join(MODEL_KINDS)}")
        if self.px_per_cell < 4:
            raise ValueError("grid resolution must be at least 4 px/cell")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ErrorField:
    """Reprojection error vectors (projected minus detected) at detected pixels."""

    pixels: np.ndarray
    vectors: np.ndarray
    image_ids: list = field(default_factory=list)

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=1)

    @classmethod
    def empty(cls) -> ErrorField:
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), [])


@dataclass
class CalibrationResult:
    model: object
    problem: CalibrationProblem
    image_ids: list
    train_ids: list
    test_ids: list
    test_poses: dict
    train_errors: ErrorField
    test_errors: ErrorField
    ba_report: dict
    init: InitializationResult | None
    scale: float
    settings: CalibrationSettings

    def pose_of(self, image_id) -> Pose:
        if image_id in self.test_poses:
            return self.test_poses[image_id]
        return self.problem.poses[self.train_ids.index(image_id)]


def detect_views(views: dict, pattern: StarPattern, window: int = 21, variant: str = "intensity", seed: int = 0):
    """Feature detections for rendered views keyed by image id."""
    out = {}
    settings = DetectionSettings(window=window, variant=variant, seed=seed)
    for key in sorted(views):
        view: GroundTruthView = views[key]
        sp, si = view.seed_correspondences()
        out[key] = detect_features(view.image, pattern, sp, si, settings=settings)
    return out


def split_train_test(ids, every: int):
    """Hold out every ``every``-th image (1-based) for testing; ``every <= 0`` keeps all."""
    ids = list(ids)
    if every <= 0:
        return ids, []
    test = ids[every - 1 :: every]
    return [k for k in ids if k not in test], test


def _observations(detections: dict, ids, pattern: StarPattern):
    feature_ids = sorted({d.square_index for k in ids for d in detections[k]})
    fmap = {f: n for n, f in enumerate(feature_ids)}
    img, feat, pix = [], [], []
    for n, k in enumerate(ids):
        for d in detections[k]:
            img.append(n)
            feat.append(fmap[d.square_index])
            pix.append(d.position)
    points = np.column_stack([pattern.feature_points(feature_ids), np.zeros(len(feature_ids))])
    return np.array(feature_ids).reshape(-1, 2), points, np.array(img), np.array(feat), np.array(pix).reshape(-1, 2)


def build_problem(camera, poses: list[Pose], detections: dict, ids, pattern: StarPattern) -> CalibrationProblem:
    """Single-camera problem over images ``ids`` with planar initial pattern points."""
    fids, points, img, feat, pix = _observations(detections, ids, pattern)
    return CalibrationProblem(
        cameras=[camera],
        rig=[Pose.identity()],
        poses=[p.copy() for p in poses],
        points=points,
        obs_camera=np.zeros(len(pix), dtype=np.int64),
        obs_image=img,
        obs_feature=feat,
        obs_pixels=pix,
        square_size=pattern.square_size,
        feature_ids=fids,
    )


def error_field(problem: CalibrationProblem, ids) -> ErrorField:
    r, valid, _ = evaluate_residuals(problem)
    return ErrorField(problem.obs_pixels[valid], r[valid], [ids[i] for i in problem.obs_image[valid]])


def _ba(problem, settings: CalibrationSettings, **kw):
    cfg = BundleAdjustmentConfig(
        lm=LMSettings(max_iterations=settings.ba_iterations), jacobian=settings.jacobian, **kw
    )
    return bundle_adjust(problem, cfg)


def localize_held_out(model, problem: CalibrationProblem, detections: dict, ids, settings: CalibrationSettings):
    """Poses of held-out images against the calibrated model and pattern; returns
    ``(poses, error field)``. Model and pattern stay fixed."""
    fmap = {tuple(map(int, f)): n for n, f in enumerate(problem.feature_ids)}
    poses, vecs, pixels, owners = {}, [], [], []
    for k in ids:
        dets = [d for d in detections[k] if d.square_index in fmap]
        if len(dets) < 6:
            continue
        feat = np.array([fmap[d.square_index] for d in dets])
        pix = np.array([d.position for d in dets])
        X = problem.points[feat]
        try:
            pose0 = localize_image(model, pix, X)
        except (InsufficientDataError, DegenerateConfigurationError, RuntimeError):
            continue
        sub = CalibrationProblem(
            cameras=[model],
            rig=[Pose.identity()],
            poses=[pose0],
            points=problem.points,
            obs_camera=np.zeros(len(feat), dtype=np.int64),
            obs_image=np.zeros(len(feat), dtype=np.int64),
            obs_feature=feat,
            obs_pixels=pix,
            square_size=problem.square_size,
        )
        sub, _ = _ba(sub, settings, optimize_cameras=False, optimize_points=False)
        poses[k] = sub.poses[0]
        f = error_field(sub, [k])
        vecs.append(f.vectors)
        pixels.append(f.pixels)
        owners += f.image_ids
    if not vecs:
        return poses, ErrorField.empty()
    return poses, ErrorField(np.concatenate(pixels), np.concatenate(vecs), owners)


def calibrate(
    detections: dict[str, list[FeatureDetection]],
    pattern: StarPattern,
    width: int,
    height: int,
    settings: CalibrationSettings | None = None,
) -> CalibrationResult:
    """Run the full pipeline on detections keyed by image id."""
    s = settings or CalibrationSettings()
    ids = sorted(k for k in detections if len(detections[k]) > 0)
    if len(ids) < 3:
        raise StageError("init", "need at least 3 images with detections")
    train_ids, test_ids = split_train_test(ids, s.test_every)
    try:
        init = initialize_calibration(
            {k: detections[k] for k in train_ids}, pattern, width, height, px_per_cell=s.px_per_cell, seed=s.seed
        )
    except (InsufficientDataError, DegenerateConfigurationError, ValueError) as exc:
        raise StageError("init", str(exc)) from exc
    train_ids = [k for k in train_ids if k in init.poses]
    poses = [init.poses[k] for k in train_ids]

    camera = init.model
    if s.model in PARAMETRIC_KINDS:
        try:
            camera, R, _ = fit_parametric_to_generic(init.model, s.model, spline_points=s.spline_points)
        except (RuntimeError, ValueError) as exc:
            raise StageError("fit", str(exc)) from exc
        poses = [Pose(R @ p.R, R @ p.t) for p in poses]

    problem = build_problem(camera, poses, detections, train_ids, pattern)
    report = {}
    try:
        problem, report = _ba(problem, s)
        if s.model == "noncentral-generic":
            problem.cameras = [problem.cameras[0].to_noncentral()]
            problem, rep2 = _ba(problem, s)
            report = {"central_stage": report, **rep2}
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise StageError("ba", str(exc)) from exc
    if report.get("status") == "diverged":
        raise StageError("ba", "bundle adjustment diverged")

    physical = s.physical_square_size or pattern.physical_square_size
    problem, scale = apply_metric_scale(problem, physical)
    model = problem.cameras[0]
    train_errors = error_field(problem, train_ids)
    test_poses, test_errors = localize_held_out(model, problem, detections, test_ids, s)
    return CalibrationResult(
        model=model,
        problem=problem,
        image_ids=ids,
        train_ids=train_ids,
        test_ids=test_ids,
        test_poses=test_poses,
        train_errors=train_errors,
        test_errors=test_errors,
        ba_report=report,
        init=init,
        scale=scale,
        settings=s,
    )


def is_generic_kind(kind: str) -> bool:
    return kind in ("central-generic", "noncentral-generic")


__all__ = [
    "CalibrationResult",
    "CalibrationSettings",
    "CentralGenericModel",
    "ErrorField",
    "MODEL_KINDS",
    "NoncentralGenericModel",
    "StageError",
    "build_problem",
    "calibrate",
    "detect_views",
    "error_field",
    "localize_held_out",
    "split_train_test",
]


# feature-localization experiments ----------------------------------------------


def localization_errors(views: dict, detections: dict) -> np.ndarray:
    """Distances between detected and true feature positions over all views."""
    errs = []
    for key in sorted(detections):
        truth = views[key].feature_lookup()
        for d in detections[key]:
            if d.square_index in truth:
                errs.append(np.linalg.norm(d.position - truth[d.square_index]))
    return np.asarray(errs)


@dataclass
class SweepRow:
    setting: object
    features: int
    median_error: float
    mean_error: float


def localization_sweep(scenario, settings_list, key: str, window: int = 21) -> list[SweepRow]:
    """Render and detect once per setting of ``key`` ("segments" or "variant")."""
    from .scenario import scenario_pattern, synthesize

    rows = []
    for value in settings_list:
        cfg = scenario
        variant = "intensity"
        if key == "segments":
            cfg = type(scenario)(**{**scenario.__dict__, "segments": int(value)})
        else:
            variant = str(value)
        pattern = scenario_pattern(cfg)
        views = {f"view{i:03d}": v for i, v in enumerate(synthesize(cfg, pattern))}
        dets = detect_views(views, pattern, window=window, variant=variant, seed=cfg.seed)
        errs = localization_errors(views, dets)
        med = float(np.median(errs)) if errs.size else float("nan")
        mean = float(errs.mean()) if errs.size else float("nan")
        rows.append(SweepRow(value, int(errs.size), med, mean))
    return rows
