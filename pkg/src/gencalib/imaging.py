"""Grayscale raster images with bilinear sampling and PGM/PNG I/O.

Pixel-center convention: integer coordinate ``(x, y)`` is the center of the
pixel in column ``x`` and row ``y``. Bilinear interpolation is defined on
``[0, width - 1] x [0, height - 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

# ITU-R BT.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


class OutOfBoundsError(ValueError):
    """Raised when a sample position leaves the interpolation domain."""


@dataclass(frozen=True, eq=False)
class RasterImage:
    """Immutable grayscale image with intensities in [0, 1].

    ``data`` is indexed ``data[y, x]`` (row-major).
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"expected a 2D intensity grid, got shape {data.shape}")
        if data.shape[0] < 2 or data.shape[1] < 2:
            raise ValueError("image must be at least 2x2 pixels")
        if not np.all(np.isfinite(data)):
            raise ValueError("image intensities must be finite")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def contains(self, x, y, margin: float = 0.0):
        """Mask of positions at least ``margin`` px inside the interpolation domain."""
        x = np.asarray(x)
        y = np.asarray(y)
        return (
            (x >= margin)
            & (y >= margin)
            & (x <= self.width - 1 - margin)
            & (y <= self.height - 1 - margin)
        )

    def _cells(self, x, y):
        x0 = np.clip(np.floor(x), 0, self.width - 2).astype(np.intp)
        y0 = np.clip(np.floor(y), 0, self.height - 2).astype(np.intp)
        return x0, y0, x - x0, y - y0

    def sample(self, x, y):
        """Vectorized bilinear sampling.

        Returns ``(values, valid)``. Out-of-domain positions get value 0 and
        ``valid == False``.
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        valid = self.contains(x, y)
        xs = np.where(valid, x, 0.0)
        ys = np.where(valid, y, 0.0)
        x0, y0, fx, fy = self._cells(xs, ys)
        d = self.data
        top = d[y0, x0] * (1 - fx) + d[y0, x0 + 1] * fx
        bottom = d[y0 + 1, x0] * (1 - fx) + d[y0 + 1, x0 + 1] * fx
        values = top * (1 - fy) + bottom * fy
        return np.where(valid, values, 0.0), valid

    def sample_with_gradient(self, x, y):
        """Bilinear values plus their analytic derivatives d/dx, d/dy.

        Returns ``(values, grad_x, grad_y, valid)``.
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        valid = self.contains(x, y)
        xs = np.where(valid, x, 0.0)
        ys = np.where(valid, y, 0.0)
        x0, y0, fx, fy = self._cells(xs, ys)
        d = self.data
        a = d[y0, x0]
        b = d[y0, x0 + 1]
        c = d[y0 + 1, x0]
        e = d[y0 + 1, x0 + 1]
        top = a + (b - a) * fx
        bottom = c + (e - c) * fx
        values = top + (bottom - top) * fy
        gx = (b - a) * (1 - fy) + (e - c) * fy
        gy = bottom - top
        zero = 0.0
        return (
            np.where(valid, values, zero),
            np.where(valid, gx, zero),
            np.where(valid, gy, zero),
            valid,
        )


def bilinear_sample(image: RasterImage, pos) -> float:
    """Bilinearly interpolated intensity at one continuous pixel position."""
    x, y = float(pos[0]), float(pos[1])
    if not image.contains(x, y):
        raise OutOfBoundsError(f"position ({x:.3f}, {y:.3f}) outside the interpolation domain")
    values, _ = image.sample(np.array([x]), np.array([y]))
    return float(values[0])


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    """Collapse an RGB(A) array to luminance; grayscale passes through."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        return pixels
    if pixels.ndim == 3 and pixels.shape[2] in (3, 4):
        return pixels[..., :3] @ _LUMA
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        return pixels[..., 0]
    raise ValueError(f"unsupported pixel array shape {pixels.shape}")


def _read_pgm(path: Path) -> RasterImage:
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    # header: magic, width, height, maxval, each separated by whitespace/comments
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: only binary P5 PGM is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval < 256:
        pixels = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    else:
        pixels = np.frombuffer(raw, dtype=">u2", count=width * height, offset=pos)
    return RasterImage(pixels.reshape(height, width).astype(np.float64) / maxval)


def _write_pgm(image: RasterImage, path: Path, bits: int) -> None:
    maxval = 255 if bits == 8 else 65535
    q = np.rint(image.data * maxval)
    pixels = q.astype(np.uint8) if bits == 8 else q.astype(">u2")
    header = f"P5\n{image.width} {image.height}\n{maxval}\n".encode("ascii")
    path.write_bytes(header + pixels.tobytes())


def read_image(path) -> RasterImage:
    """Load an 8/16-bit PGM or PNG; color is converted to grayscale."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return _read_pgm(path)
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            pixels = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            pixels = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB", "RGBA") else im)
            pixels = to_grayscale(pixels.astype(np.float64) / 255.0)
    return RasterImage(np.clip(pixels, 0.0, 1.0))


def write_image(image: RasterImage, path, bits: int = 8) -> None:
    """Write as PGM (P5) or PNG depending on the suffix."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        _write_pgm(image, path, bits)
        return
    from PIL import Image

    if bits == 8:
        Image.fromarray(np.rint(image.data * 255).astype(np.uint8)).save(path)
    else:
        q = np.rint(image.data * 65535).astype(np.uint16)
        Image.fromarray(q).save(path)
