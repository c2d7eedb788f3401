"""Synthetic calibration scenarios: pose sampling and batch rendering."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Pose, rotation_from_rotvec
from .models.synthetic import CameraSpec
from .pattern import GroundTruthView, StarPattern, default_pattern, render_synthetic


@dataclass
class ScenarioConfig:
    views: int = 30
    segments: int = 16
    camera: CameraSpec = field(default_factory=CameraSpec)
    blur_sigma: float = 0.5
    noise_sigma: float = 0.01
    supersampling: int = 4
    min_distance: float = 0.3
    max_distance: float = 0.55
    max_tilt_deg: float = 35.0
    min_features: int = 40
    seed: int = 0
    squares_x: int = 32
    squares_y: int = 24
    square_size: float = 0.015

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioConfig:
        d = dict(d)
        if isinstance(d.get("camera"), dict):
            d["camera"] = CameraSpec(**d["camera"])
        return cls(**d)


def sample_pose(camera, pattern: StarPattern, rng: np.random.Generator, cfg: ScenarioConfig) -> Pose:
    """Pattern center placed along the ray of a random pixel, with random tilt and roll."""
    px = rng.uniform([0, 0], [camera.width - 1, camera.height - 1])
    origin, d, _ = camera.unproject_lines(px[None, :])
    dist = rng.uniform(cfg.min_distance, cfg.max_distance)
    center = origin[0] + dist * d[0]
    tilt_axis = rng.normal(size=2)
    tilt_axis = np.append(tilt_axis / np.linalg.norm(tilt_axis), 0.0)
    tilt = np.deg2rad(rng.uniform(0, cfg.max_tilt_deg))
    roll = rng.uniform(-np.pi, np.pi)
    R = rotation_from_rotvec(tilt * tilt_axis) @ rotation_from_rotvec([0.0, 0.0, roll])
    w, h = pattern.extent
    t = center - R @ np.array([w / 2, h / 2, 0.0])
    return Pose(R, t)


def scenario_pattern(cfg: ScenarioConfig) -> StarPattern:
    return default_pattern(cfg.segments, cfg.square_size, cfg.squares_x, cfg.squares_y)


def synthesize(cfg: ScenarioConfig, pattern: StarPattern | None = None) -> list[GroundTruthView]:
    """Render ``cfg.views`` views; poses with too few visible features are redrawn."""
    pattern = pattern or scenario_pattern(cfg)
    camera = cfg.camera.build()
    rng = np.random.default_rng(cfg.seed)
    views = []
    while len(views) < cfg.views:
        pose = sample_pose(camera, pattern, rng, cfg)
        # cheap visibility check before rendering
        pts = np.column_stack([pattern.feature_points(pattern.feature_indices()), np.zeros(len(pattern.feature_indices()))])
        px, ok = camera.project(pose.apply(pts))
        inside = ok & (px[:, 0] >= 10) & (px[:, 1] >= 10)
        inside &= (px[:, 0] <= camera.width - 11) & (px[:, 1] <= camera.height - 11)
        if inside.sum() < cfg.min_features:
            continue
        view = render_synthetic(
            pattern,
            camera,
            pose,
            supersampling=cfg.supersampling,
            blur_sigma=cfg.blur_sigma,
            noise_sigma=cfg.noise_sigma,
            rng=rng,
        )
        if len(view.seed_correspondences()[0]) < 4:
            continue
        views.append(view)
    return views
