from __future__ import annotations

import json
import shutil

import numpy as np
import pytest

from gencalib import cli
from gencalib.imaging import read_image
from gencalib.models.io import load_calibration, read_direction_lut

SCENARIO = {
    "scenario": {
        "views": 8,
        "segments": 16,
        "supersampling": 2,
        "min_distance": 0.6,
        "max_distance": 0.9,
        "squares_x": 10,
        "squares_y": 8,
        "square_size": 0.05,
        "min_features": 20,
        "camera": {
            "kind": "wavy",
            "params": {"width": 320, "height": 240, "fx": 300.0, "fy": 300.0, "cx": 159.5, "cy": 119.5},
        },
    }
}


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scenario.json").write_text(json.dumps(SCENARIO))
    assert run("synthesize", "--config", root / "scenario.json", "--out", root / "syn") == 0
    det = root / "det.csv"
    assert run("detect", "--pattern", root / "syn/pattern.json", "--images", root / "syn/images", "--out", det) == 0
    return root


def calibrate(ws, out, *extra):
    return run(
        "calibrate", "--detections", ws / "det.csv", "--image-size", 320, 240,
        "--pattern", ws / "syn/pattern.json", "--px-per-cell", 20, "--test-every", 4, "--out", out, *extra,
    )


def test_synthesize_outputs(workspace):
    syn = workspace / "syn"
    assert (syn / "pattern.json").is_file() and (syn / "scenario.json").is_file()
    pngs = sorted((syn / "images").glob("*.png"))
    assert len(pngs) == 8
    side = json.loads(pngs[0].with_suffix(".json").read_text())
    assert {"pose", "features", "seeds"} <= set(side) and len(side["seeds"]) >= 4
    img = read_image(pngs[0])
    assert (img.width, img.height) == (320, 240)


def test_detections_file(workspace):
    lines = (workspace / "det.csv").read_text().splitlines()
    assert lines[0].split(",")[:3] == ["image_id", "i", "j"]
    assert len(lines) > 200


def test_calibrate_outputs(workspace, capsys):
    out = workspace / "cal"
    assert calibrate(workspace, out, "--lut") == 0
    stats = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert stats["train_median_px"] < 0.05
    for name in ("calibration.json", "stats.csv", "errors.csv", "report.json", "error_directions.png",
                 "error_histogram.png", "directions.bin"):
        assert (out / name).is_file(), name
    model, meta = load_calibration(out / "calibration.json")
    assert model.kind == "central-generic"
    assert set(meta["train_images"]) | set(meta["test_images"]) == {f"view{i:03d}" for i in range(8)}
    lut = read_direction_lut(out / "directions.bin", 320, 240)
    d, ok = model.unproject(np.array([[160.0, 120.0]]))
    assert ok[0] and np.allclose(lut[120, 160], d[0], atol=1e-6)


def test_calibrate_is_deterministic(workspace):
    a, b = workspace / "det_a", workspace / "det_b"
    assert calibrate(workspace, a) == 0
    assert calibrate(workspace, b) == 0
    assert (a / "calibration.json").read_bytes() == (b / "calibration.json").read_bytes()


def test_calibrate_parametric(workspace, capsys):
    assert calibrate(workspace, workspace / "tpf", "--model", "thin-prism-fisheye") == 0
    model, _ = load_calibration(workspace / "tpf/calibration.json")
    assert model.kind == "thin-prism-fisheye"


def test_evaluate_against_ground_truth(workspace, capsys):
    if not (workspace / "cal/calibration.json").is_file():
        assert calibrate(workspace, workspace / "cal") == 0
    out = workspace / "eval"
    rc = run(
        "evaluate", "--calibration", workspace / "cal/calibration.json", "--pattern", workspace / "syn/pattern.json",
        "--images", workspace / "syn/images", "--ground-truth", workspace / "syn", "--grid", 4, 3, "--out", out,
    )
    assert rc == 0
    stats = json.loads((out / "evaluation.json").read_text())
    assert stats["localized_images"] == 8
    assert stats["median_px"] < 0.5
    assert 0 <= stats["angular_error_fraction_below_1e-3"] <= 1


def test_compare_and_pose_bias(workspace, capsys):
    if not (workspace / "cal/calibration.json").is_file():
        assert calibrate(workspace, workspace / "cal") == 0
    cal = workspace / "cal/calibration.json"
    assert run("compare", "--a", cal, "--b", cal, "--out", workspace / "cmp_self") == 0
    assert json.loads((workspace / "cmp_self/compare.json").read_text())["max_px"] < 1e-6
    assert run("compare", "--a", cal, "--fit", "thin-prism-fisheye", "--out", workspace / "cmp_fit") == 0
    assert (workspace / "cmp_fit/fitted_calibration.json").is_file()
    capsys.readouterr()
    assert run("pose-bias", "--gt", cal, "--test", cal, "--trials", 10) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["median_center_error_m"] <= 1e-9


def test_stereo_bias_output(capsys):
    assert run("stereo-bias", "--baseline", 0.05, "--focal", 650, "--depth", 2, "--disparity-error", 0.05) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["depth_error_m"] == pytest.approx(0.006134969325153, rel=1e-12)


def test_segment_sweep(tmp_path, capsys):
    cfg = json.loads(json.dumps(SCENARIO))
    cfg["scenario"]["views"] = 2
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("segment-sweep", "--config", tmp_path / "c.json", "--values", 4, 16, "--out", tmp_path / "sw") == 0
    rows = json.loads((tmp_path / "sw/segments_sweep.json").read_text())
    assert [r["setting"] for r in rows] == [4, 16] and all(r["features"] > 0 for r in rows)


# exit codes -------------------------------------------------------------------


def test_missing_config_is_config_error(tmp_path):
    assert run("calibrate", "--config", tmp_path / "nope.json", "--out", tmp_path) == cli.EXIT_CONFIG


def test_detections_need_image_size(workspace, tmp_path):
    rc = run("calibrate", "--detections", workspace / "det.csv", "--pattern", workspace / "syn/pattern.json",
             "--out", tmp_path)
    assert rc == cli.EXIT_CONFIG


def test_bad_segment_count_is_config_error(tmp_path):
    assert run("synthesize", "--segments", 6, "--views", 1, "--out", tmp_path) == cli.EXIT_CONFIG
    assert run("segment-sweep", "--values", 5, "--out", tmp_path) == cli.EXIT_CONFIG


def test_images_without_sidecars_are_data_error(workspace, tmp_path):
    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    shutil.copy(workspace / "syn/images/view000.png", img_dir)
    rc = run("detect", "--pattern", workspace / "syn/pattern.json", "--images", img_dir, "--out", tmp_path / "d.csv")
    assert rc == cli.EXIT_DATA


def test_too_few_images_is_data_error(workspace, tmp_path):
    lines = (workspace / "det.csv").read_text().splitlines()
    keep = [lines[0]] + [ln for ln in lines[1:] if ln.startswith(("view000,", "view001,"))]
    (tmp_path / "few.csv").write_text("\n".join(keep) + "\n")
    rc = run("calibrate", "--detections", tmp_path / "few.csv", "--image-size", 320, 240,
             "--pattern", workspace / "syn/pattern.json", "--out", tmp_path / "o")
    assert rc == cli.EXIT_DATA


def test_stage_failure_in_bundle_adjustment_is_convergence_error(workspace, tmp_path, monkeypatch):
    from gencalib import pipeline

    def fail(*args, **kwargs):
        raise pipeline.StageError("ba", "bundle adjustment diverged")

    monkeypatch.setattr(pipeline, "calibrate", fail)
    assert calibrate(workspace, tmp_path / "o") == cli.EXIT_CONVERGENCE


def test_degenerate_stereo_is_data_error():
    assert run("stereo-bias", "--disparity-error", -100) == cli.EXIT_DATA
