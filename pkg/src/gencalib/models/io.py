"""Calibration files (JSON) and dense direction lookup tables (binary)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .generic import generic_from_dict
from .parametric import PARAMETRIC_KINDS, parametric_from_dict

FORMAT_VERSION = 1


def model_to_dict(model) -> dict:
    return model.to_dict()


def model_from_dict(d: dict):
    if d["kind"] in PARAMETRIC_KINDS:
        return parametric_from_dict(d)
    return generic_from_dict(d)


def dumps_calibration(model, metadata: dict | None = None) -> str:
    """Deterministic JSON text: sorted keys, shortest round-trip float repr."""
    doc = {"format_version": FORMAT_VERSION, "model": model_to_dict(model)}
    if metadata:
        doc["metadata"] = metadata
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"


def save_calibration(path, model, metadata: dict | None = None) -> None:
    Path(path).write_text(dumps_calibration(model, metadata))


def load_calibration(path):
    """Returns ``(model, metadata dict)``."""
    doc = json.loads(Path(path).read_text())
    return model_from_dict(doc["model"]), doc.get("metadata", {})


def write_direction_lut(path, model, width: int | None = None, height: int | None = None) -> tuple[int, int]:
    """Row-major little-endian float32 table of 3 direction components per
    pixel (NaN outside the calibrated area); returns ``(width, height)``."""
    width = width or model.width
    height = height or model.height
    if hasattr(model, "direction_lut"):
        lut = model.direction_lut(width, height)
    else:
        gy, gx = np.mgrid[0:height, 0:width]
        px = np.column_stack([gx.ravel(), gy.ravel()]).astype(np.float64)
        _, d, ok = model.unproject_lines(px)
        lut = np.where(ok[:, None], d, np.nan).reshape(height, width, 3)
    lut.astype("<f4").tofile(str(path))
    return width, height


def read_direction_lut(path, width: int, height: int) -> np.ndarray:
    return np.fromfile(str(path), dtype="<f4").reshape(height, width, 3)
