"""Command-line front end: synthesize, detect, calibrate, evaluate, compare,
stereo-bias, pose-bias, segment-sweep and variant-sweep.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 convergence
failure. Options come from an optional JSON file (``--config``) overridden by
explicit flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_CONVERGENCE = 3

CALIBRATION_FILE = "calibration.json"


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class ConvergenceFailure(Exception):
    pass


# configuration ---------------------------------------------------------------


def _load_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _option(args, cfg: dict, name: str, default=None):
    """Flag value if given, else config value, else ``default``."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    return cfg.get(name, default)


def _require_file(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _require_dir(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing {what}")
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _scenario_config(args, cfg: dict):
    from .models.synthetic import CameraSpec
    from .scenario import ScenarioConfig

    base = ScenarioConfig.from_dict(cfg.get("scenario", {})) if "scenario" in cfg else ScenarioConfig()
    over = {
        "views": _option(args, {}, "views"),
        "segments": _option(args, {}, "segments"),
        "seed": _option(args, {}, "seed"),
        "blur_sigma": _option(args, {}, "blur"),
        "noise_sigma": _option(args, {}, "noise"),
        "supersampling": _option(args, {}, "supersampling"),
    }
    d = base.to_dict()
    d["camera"] = base.camera
    for k, v in over.items():
        if v is not None:
            d[k] = v
    kind = getattr(args, "camera", None)
    if kind is not None:
        d["camera"] = CameraSpec(kind=kind, params={})
    try:
        sc = ScenarioConfig(**d)
        sc.camera.build()
        if sc.views < 0:
            raise ValueError("views must be >= 0")
        if sc.segments % 4 or sc.segments < 4:
            raise ValueError("segments must be a positive multiple of 4")
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc
    return sc


# image sets ------------------------------------------------------------------


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in (".png", ".pgm"))


def _load_image_set(directory: Path):
    """Images with their sidecars; returns ``{id: (RasterImage, sidecar dict)}``."""
    from .imaging import read_image
    from .pattern import load_sidecar

    out = {}
    for path in _image_files(directory):
        side = path.with_suffix(".json")
        if not side.is_file():
            raise DataError(f"no seed sidecar for {path.name}; fiducial decoding is external")
        out[path.stem] = (read_image(path), load_sidecar(side))
    if not out:
        raise DataError(f"no images in {directory}")
    return out


def _detect_image_set(images: dict, pattern, window: int, variant: str, seed: int):
    from .features import DetectionSettings, detect_features

    settings = DetectionSettings(window=window, variant=variant, seed=seed)
    dets = {}
    for key in sorted(images):
        img, side = images[key]
        dets[key] = detect_features(img, pattern, side["seed_pattern"], side["seed_image"], settings=settings)
    return dets


def _load_pattern(path):
    from .pattern import load_pattern

    p = _require_file(path, "pattern file")
    try:
        return load_pattern(p)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid pattern file: {exc}") from exc


def _detections_and_size(args, cfg, pattern):
    """Detections plus image size from ``--images`` or ``--detections``."""
    from .features import read_detections

    images = _option(args, cfg, "images")
    det_path = _option(args, cfg, "detections")
    window = int(_option(args, cfg, "window", 21))
    variant = _option(args, cfg, "variant", "intensity")
    seed = int(_option(args, cfg, "seed", 0))
    if images is not None:
        d = _require_dir(images, "image directory")
        imgs = _load_image_set(d)
        first = next(iter(imgs.values()))[0]
        return _detect_image_set(imgs, pattern, window, variant, seed), (first.width, first.height)
    if det_path is not None:
        p = _require_file(det_path, "detections file")
        size = _option(args, cfg, "image_size")
        if not size or len(size) != 2:
            raise ConfigError("--image-size W H is required with --detections")
        try:
            dets = read_detections(p)
        except (KeyError, ValueError) as exc:
            raise DataError(f"unreadable detections file: {exc}") from exc
        return dets, (int(size[0]), int(size[1]))
    raise ConfigError("give --images or --detections")


# commands --------------------------------------------------------------------


def cmd_synthesize(args) -> int:
    from .imaging import write_image
    from .pattern import save_pattern, save_sidecar
    from .scenario import scenario_pattern, synthesize

    cfg = _load_config(args)
    sc = _scenario_config(args, cfg)
    out = Path(_option(args, cfg, "out") or "")
    if not str(out):
        raise ConfigError("missing --out")
    pattern = scenario_pattern(sc)
    views = synthesize(sc, pattern)
    camera = sc.camera.build()
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    save_pattern(pattern, out / "pattern.json")
    doc = sc.to_dict()
    doc["image_width"], doc["image_height"] = camera.width, camera.height
    _write_json(out / "scenario.json", doc)
    for i, view in enumerate(views):
        view.camera_id = "camera0"
        write_image(view.image, img_dir / f"view{i:03d}.png", bits=16)
        save_sidecar(view, img_dir / f"view{i:03d}.json")
    print(f"wrote {len(views)} views to {img_dir}")
    return EXIT_OK


def cmd_detect(args) -> int:
    from .features import write_detections

    cfg = _load_config(args)
    pattern = _load_pattern(_option(args, cfg, "pattern"))
    images = _require_dir(_option(args, cfg, "images"), "image directory")
    out = _option(args, cfg, "out")
    if out is None:
        raise ConfigError("missing --out")
    window = int(_option(args, cfg, "window", 21))
    variant = _option(args, cfg, "variant", "intensity")
    dets = _detect_image_set(_load_image_set(images), pattern, window, variant, int(_option(args, cfg, "seed", 0)))
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_detections(out, dets)
    print(f"{sum(len(v) for v in dets.values())} features in {len(dets)} images -> {out}")
    return EXIT_OK


def _calibration_settings(args, cfg):
    from .pipeline import CalibrationSettings

    try:
        settings = CalibrationSettings(
            model=_option(args, cfg, "model", "central-generic"),
            px_per_cell=float(_option(args, cfg, "px_per_cell", 10.0)),
            window=int(_option(args, cfg, "window", 21)),
            variant=_option(args, cfg, "variant", "intensity"),
            test_every=int(_option(args, cfg, "test_every", 10)),
            seed=int(_option(args, cfg, "seed", 0)),
            ba_iterations=int(_option(args, cfg, "max_iterations", 50)),
            jacobian=_option(args, cfg, "jacobian", "implicit"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if settings.px_per_cell < settings.window / 4:
        print(
            f"warning: {settings.px_per_cell} px/cell is finer than a {settings.window} px feature window supports",
            file=sys.stderr,
        )
    return settings


def _report_outputs(out: Path, result, pattern, image_size) -> dict:
    import numpy as np

    from .evaluation import NoQualifyingCellsError, biasedness, error_direction_map
    from .plotting import save_error_direction_map, save_error_histogram

    train, test = result.train_errors, result.test_errors
    area = getattr(result.model, "area", None)
    bounds = area if area is not None else (0, 0, image_size[0] - 1, image_size[1] - 1)
    try:
        bias = biasedness(train.pixels, train.vectors, bounds)
    except NoQualifyingCellsError:
        bias = None
    stats = {
        "model": result.settings.model,
        "train_median_px": float(np.median(train.norms)) if len(train.norms) else None,
        "test_median_px": float(np.median(test.norms)) if len(test.norms) else None,
        "train_observations": int(len(train.norms)),
        "test_observations": int(len(test.norms)),
        "biasedness": bias,
        "metric_scale": result.scale,
    }
    with open(out / "stats.csv", "w") as fh:
        fh.write("key,value\n")
        for k in sorted(stats):
            fh.write(f"{k},{stats[k]}\n")
    with open(out / "errors.csv", "w") as fh:
        fh.write("set,image_id,x,y,ex,ey\n")
        for name, f in (("train", train), ("test", test)):
            for img, p, v in zip(f.image_ids, f.pixels, f.vectors):
                fh.write(f"{name},{img},{p[0]!r},{p[1]!r},{v[0]!r},{v[1]!r}\n")
    if len(train.norms):
        rgb = error_direction_map(train.pixels, train.vectors, image_size[0], image_size[1])
        save_error_direction_map(out / "error_directions.png", rgb, f"{result.settings.model}: error directions")
        save_error_histogram(out / "error_histogram.png", train.norms, test.norms)
    return stats


def cmd_calibrate(args) -> int:
    from .ba import CalibrationProblem  # noqa: F401  (import errors surface before any output)
    from .models.io import dumps_calibration, write_direction_lut
    from .pipeline import StageError, calibrate

    cfg = _load_config(args)
    pattern = _load_pattern(_option(args, cfg, "pattern"))
    out_arg = _option(args, cfg, "out")
    if out_arg is None:
        raise ConfigError("missing --out")
    settings = _calibration_settings(args, cfg)
    dets, size = _detections_and_size(args, cfg, pattern)
    try:
        result = calibrate(dets, pattern, size[0], size[1], settings)
    except StageError as exc:
        if exc.stage == "ba" or exc.stage == "fit":
            raise ConvergenceFailure(str(exc)) from exc
        raise DataError(str(exc)) from exc
    problem = result.problem
    meta = {
        "pattern": pattern.to_dict(),
        "settings": settings.to_dict(),
        "metric_scale": result.scale,
        "train_images": result.train_ids,
        "test_images": result.test_ids,
        "poses": {k: result.pose_of(k).to_dict() for k in result.train_ids + sorted(result.test_poses)},
        "pattern_points": {
            f"{int(i)},{int(j)}": [float(v) for v in p] for (i, j), p in zip(problem.feature_ids, problem.points)
        },
    }
    out = Path(out_arg)
    out.mkdir(parents=True, exist_ok=True)
    (out / CALIBRATION_FILE).write_text(dumps_calibration(result.model, meta))
    stats = _report_outputs(out, result, pattern, size)
    report = {k: v for k, v in result.ba_report.items()}
    report["stats"] = stats
    _write_json(out / "report.json", report)
    if getattr(args, "lut", False):
        write_direction_lut(out / "directions.bin", result.model, size[0], size[1])
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def _load_calibration(path):
    from .models.io import load_calibration

    p = _require_file(path, "calibration file")
    try:
        return load_calibration(p)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid calibration file {p}: {exc}") from exc


def cmd_evaluate(args) -> int:
    import numpy as np

    from .evaluation import NoQualifyingCellsError, biasedness, error_direction_map
    from .geometry import Pose
    from .models.fitting import compare_generic
    from .pipeline import CalibrationSettings, ErrorField, localize_held_out
    from .ba import CalibrationProblem
    from .plotting import save_error_direction_map

    cfg = _load_config(args)
    model, meta = _load_calibration(_option(args, cfg, "calibration"))
    pattern = _load_pattern(_option(args, cfg, "pattern"))
    out_arg = _option(args, cfg, "out")
    if out_arg is None:
        raise ConfigError("missing --out")
    dets, size = _detections_and_size(args, cfg, pattern)
    pts = meta.get("pattern_points", {})
    if pts:
        fids = np.array([list(map(int, k.split(","))) for k in pts])
        points = np.array(list(pts.values()))
    else:
        fids = pattern.feature_indices()
        points = np.column_stack([pattern.feature_points(fids), np.zeros(len(fids))])
    problem = CalibrationProblem([model], [Pose.identity()], [], points, [], [], [], np.zeros((0, 2)), feature_ids=fids)
    poses, field = localize_held_out(model, problem, dets, sorted(dets), CalibrationSettings())
    if not len(field.norms):
        raise DataError("no image could be localized with this calibration")
    grid = _option(args, cfg, "grid", [50, 50])
    area = getattr(model, "area", None) or (0, 0, size[0] - 1, size[1] - 1)
    try:
        bias = biasedness(field.pixels, field.vectors, area, tuple(grid), int(_option(args, cfg, "min_samples", 20)))
    except NoQualifyingCellsError:
        bias = None
    stats = {
        "median_px": float(np.median(field.norms)),
        "observations": int(len(field.norms)),
        "localized_images": len(poses),
        "biasedness": bias,
    }
    gt_dir = _option(args, cfg, "ground_truth")
    if gt_dir is not None:
        from .models.synthetic import CameraSpec

        scen = json.loads(_require_file(Path(gt_dir) / "scenario.json", "scenario file").read_text())
        gt = CameraSpec(**scen["camera"]).build()
        if hasattr(model, "area"):
            _, dm = compare_generic(model, gt, step=4.0)
            ang = dm.magnitude / dm.focal
            ok = np.isfinite(ang)
            stats["angular_error_median_rad"] = float(np.median(ang[ok]))
            stats["angular_error_fraction_below_1e-3"] = float(np.mean(ang[ok] <= 1e-3))
    out = Path(out_arg)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "evaluation.json", stats)
    rgb = error_direction_map(field.pixels, field.vectors, size[0], size[1])
    save_error_direction_map(out / "error_directions.png", rgb, "error directions")
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_compare(args) -> int:
    import numpy as np

    from .models.fitting import DisjointAreaError, FitDivergenceError, compare_generic, fit_parametric_to_generic
    from .evaluation import direction_colors
    from .models.io import dumps_calibration
    from .plotting import save_difference_map, save_rgb

    cfg = _load_config(args)
    a, _ = _load_calibration(_option(args, cfg, "a"))
    out_arg = _option(args, cfg, "out")
    if out_arg is None:
        raise ConfigError("missing --out")
    step = float(_option(args, cfg, "step", 4.0))
    fit = _option(args, cfg, "fit")
    if not hasattr(a, "area"):
        raise ConfigError("calibration A must be a generic model")
    fitted = None
    try:
        if fit is not None:
            fitted, R, dm = fit_parametric_to_generic(a, fit, step=step)
        else:
            b, _ = _load_calibration(_option(args, cfg, "b"))
            R, dm = compare_generic(a, b, step=step)
    except DisjointAreaError as exc:
        raise DataError(str(exc)) from exc
    except FitDivergenceError as exc:
        raise ConvergenceFailure(str(exc)) from exc
    except KeyError as exc:
        raise ConfigError(f"unknown parametric model {fit!r}") from exc
    out = Path(out_arg)
    out.mkdir(parents=True, exist_ok=True)
    mag = dm.magnitude.reshape(dm.shape)
    save_difference_map(out / "difference_magnitude.png", mag, "direction difference [px]")
    vec = dm.vectors.reshape(dm.shape + (2,))
    rgb = direction_colors(np.nan_to_num(vec.reshape(-1, 2))).reshape(dm.shape + (3,))
    rgb[~np.isfinite(mag)] = 1.0
    save_rgb(out / "difference_directions.png", rgb)
    finite = np.isfinite(dm.magnitude)
    stats = {
        "max_px": dm.max(),
        "median_px": dm.median(),
        "mean_px": float(np.mean(dm.magnitude[finite])) if finite.any() else None,
        "rotation": np.asarray(R).tolist(),
        "focal_px": dm.focal,
    }
    _write_json(out / "compare.json", stats)
    with open(out / "difference.csv", "w") as fh:
        fh.write("x,y,magnitude_px,dx,dy\n")
        for p, m, v in zip(dm.pixels, dm.magnitude, dm.vectors):
            fh.write(f"{p[0]!r},{p[1]!r},{m!r},{v[0]!r},{v[1]!r}\n")
    if fitted is not None:
        (out / "fitted_calibration.json").write_text(dumps_calibration(fitted))
    print(json.dumps({k: stats[k] for k in ("max_px", "median_px")}, sort_keys=True))
    return EXIT_OK


def cmd_stereo_bias(args) -> int:
    from .evaluation import DegenerateStereoError, StereoBiasConfig, stereo_depth_bias

    cfg = _load_config(args)
    try:
        sc = StereoBiasConfig(
            baseline=float(_option(args, cfg, "baseline", 0.05)),
            focal=float(_option(args, cfg, "focal", 650.0)),
            depth=float(_option(args, cfg, "depth", 2.0)),
            disparity_error=float(_option(args, cfg, "disparity_error", 0.05)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        err = stereo_depth_bias(sc)
    except DegenerateStereoError as exc:
        raise DataError(str(exc)) from exc
    print(json.dumps({"depth_error_m": err, "baseline": sc.baseline, "focal": sc.focal, "depth": sc.depth,
                      "disparity_error": sc.disparity_error}, sort_keys=True))
    return EXIT_OK


def cmd_pose_bias(args) -> int:
    from .evaluation import pose_bias_experiment
    from .models.fitting import FitDivergenceError, fit_parametric_to_generic

    cfg = _load_config(args)
    gt, _ = _load_calibration(_option(args, cfg, "gt"))
    if not hasattr(gt, "area"):
        raise ConfigError("the ground-truth calibration must be a generic model")
    fit = _option(args, cfg, "fit")
    if fit is not None:
        try:
            test, _, _ = fit_parametric_to_generic(gt, fit)
        except FitDivergenceError as exc:
            raise ConvergenceFailure(str(exc)) from exc
        except KeyError as exc:
            raise ConfigError(f"unknown parametric model {fit!r}") from exc
    else:
        test, _ = _load_calibration(_option(args, cfg, "test"))
    res = pose_bias_experiment(
        gt,
        test,
        n_points=int(_option(args, cfg, "points", 15)),
        trials=int(_option(args, cfg, "trials", 100)),
        seed=int(_option(args, cfg, "seed", 0)),
    )
    doc = {"median_center_error_m": res.median_error, "trials": int(len(res.errors)), "failures": res.failures}
    out = _option(args, cfg, "out")
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(out) / "pose_bias.json", doc)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def _sweep(args, key: str, values) -> int:
    from .pipeline import localization_sweep
    from .plotting import save_sweep_plot

    cfg = _load_config(args)
    sc = _scenario_config(args, cfg)
    out_arg = _option(args, cfg, "out")
    if out_arg is None:
        raise ConfigError("missing --out")
    rows = localization_sweep(sc, values, key, window=int(_option(args, cfg, "window", 21)))
    out = Path(out_arg)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{key}_sweep.csv", "w") as fh:
        fh.write(f"{key},features,median_error_px,mean_error_px\n")
        for r in rows:
            fh.write(f"{r.setting},{r.features},{r.median_error!r},{r.mean_error!r}\n")
    save_sweep_plot(
        out / f"{key}_sweep.png", [r.setting for r in rows], [r.median_error for r in rows], "median error [px]"
    )
    _write_json(out / f"{key}_sweep.json", [r.__dict__ for r in rows])
    for r in rows:
        print(f"{key}={r.setting}: {r.features} features, median error {r.median_error:.4f} px")
    return EXIT_OK


def cmd_segment_sweep(args) -> int:
    values = args.values or [4, 8, 12, 16, 24, 32]
    if any(v % 4 or v < 4 for v in values):
        raise ConfigError("segment counts must be positive multiples of 4")
    return _sweep(args, "segments", values)


def cmd_variant_sweep(args) -> int:
    from .features import VARIANTS

    values = args.values or list(VARIANTS)
    bad = [v for v in values if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}; choose from {', '.join(VARIANTS)}")
    return _sweep(args, "variant", values)


# parser ----------------------------------------------------------------------


def _add_scenario_flags(p):
    p.add_argument("--views", type=int)
    p.add_argument("--segments", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--blur", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--supersampling", type=int)
    p.add_argument("--camera", choices=["pinhole", "wavy", "noncentral-wavy"])


def _add_data_flags(p):
    p.add_argument("--pattern", help="pattern JSON file")
    p.add_argument("--images", help="directory of images with seed sidecars")
    p.add_argument("--detections", help="detections CSV (image_id,i,j,x,y)")
    p.add_argument("--image-size", dest="image_size", type=int, nargs=2, metavar=("W", "H"))
    p.add_argument("--window", type=int)
    p.add_argument("--variant", choices=["intensity", "gradient-magnitude", "gradient-xy"])
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gencalib", description=__doc__.split("\n\n")[0])
    parser.add_argument("--threads", type=int, help="cap worker threads of the numeric libraries")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="render synthetic views with ground-truth sidecars")
    p.add_argument("--config")
    p.add_argument("--out")
    _add_scenario_flags(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("detect", help="detect star features in an image set")
    p.add_argument("--config")
    p.add_argument("--out", help="detections CSV to write")
    _add_data_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("calibrate", help="detect, initialize, bundle-adjust and report")
    p.add_argument("--config")
    p.add_argument("--out", help="output directory")
    _add_data_flags(p)
    p.add_argument("--model", choices=["central-generic", "noncentral-generic", "polynomial12",
                                       "thin-prism-fisheye", "central-radial"])
    p.add_argument("--px-per-cell", dest="px_per_cell", type=float)
    p.add_argument("--test-every", dest="test_every", type=int)
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--jacobian", choices=["implicit", "finite-difference"])
    p.add_argument("--lut", action="store_true", help="also write a per-pixel direction table")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="reprojection statistics of a calibration on an image set")
    p.add_argument("--config")
    p.add_argument("--calibration")
    p.add_argument("--out")
    _add_data_flags(p)
    p.add_argument("--grid", type=int, nargs=2, metavar=("COLS", "ROWS"))
    p.add_argument("--min-samples", dest="min_samples", type=int)
    p.add_argument("--ground-truth", dest="ground_truth", help="synthesize output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="per-pixel direction differences between calibrations")
    p.add_argument("--config")
    p.add_argument("--a", help="generic calibration")
    p.add_argument("--b", help="second calibration")
    p.add_argument("--fit", choices=["polynomial12", "thin-prism-fisheye", "central-radial"],
                   help="fit this parametric model to A instead of loading B")
    p.add_argument("--step", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("stereo-bias", help="depth error caused by a disparity error")
    p.add_argument("--config")
    p.add_argument("--baseline", type=float)
    p.add_argument("--focal", type=float)
    p.add_argument("--depth", type=float)
    p.add_argument("--disparity-error", dest="disparity_error", type=float)
    p.set_defaults(func=cmd_stereo_bias)

    p = sub.add_parser("pose-bias", help="camera-center error from localizing with a biased model")
    p.add_argument("--config")
    p.add_argument("--gt", help="generic calibration taken as ground truth")
    p.add_argument("--test", help="calibration used for localization")
    p.add_argument("--fit", choices=["polynomial12", "thin-prism-fisheye", "central-radial"])
    p.add_argument("--points", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pose_bias)

    for name, func, kind in (
        ("segment-sweep", cmd_segment_sweep, int),
        ("variant-sweep", cmd_variant_sweep, str),
    ):
        p = sub.add_parser(name, help="feature localization error per setting")
        p.add_argument("--config")
        p.add_argument("--out")
        p.add_argument("--values", nargs="+", type=kind)
        p.add_argument("--window", type=int)
        _add_scenario_flags(p)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConvergenceFailure as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
