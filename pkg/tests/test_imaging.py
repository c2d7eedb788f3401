from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gencalib.imaging import OutOfBoundsError, RasterImage, bilinear_sample, read_image, write_image


def reference_bilinear(data, x, y):
    """Textbook bilinear interpolation over the four surrounding pixels."""
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x0 = min(x0, data.shape[1] - 2)
    y0 = min(y0, data.shape[0] - 2)
    fx, fy = x - x0, y - y0
    return (
        data[y0, x0] * (1 - fx) * (1 - fy)
        + data[y0, x0 + 1] * fx * (1 - fy)
        + data[y0 + 1, x0] * (1 - fx) * fy
        + data[y0 + 1, x0 + 1] * fx * fy
    )


@pytest.fixture(scope="module")
def image():
    rng = np.random.default_rng(3)
    return RasterImage(rng.uniform(size=(9, 13)))


@given(x=st.floats(0, 12), y=st.floats(0, 8))
def test_bilinear_matches_reference(image, x, y):
    assert bilinear_sample(image, (x, y)) == pytest.approx(reference_bilinear(image.data, x, y), abs=1e-12)


def test_integer_positions_return_pixels(image):
    for x, y in [(0, 0), (12, 8), (5, 3)]:
        assert bilinear_sample(image, (x, y)) == pytest.approx(image.data[y, x], abs=1e-15)


@given(x=st.floats(0.01, 11.99), y=st.floats(0.01, 7.99))
def test_gradient_matches_finite_differences(image, x, y):
    v, gx, gy, ok = image.sample_with_gradient(np.array([x]), np.array([y]))
    assert ok[0]
    h = 1e-6
    # bilinear is piecewise linear; step within the cell where possible
    sx = -h if x - np.floor(x) > 0.5 else h
    sy = -h if y - np.floor(y) > 0.5 else h
    vx = image.sample(np.array([x + sx]), np.array([y]))[0][0]
    vy = image.sample(np.array([x]), np.array([y + sy]))[0][0]
    assert gx[0] == pytest.approx((vx - v[0]) / sx, abs=1e-6)
    assert gy[0] == pytest.approx((vy - v[0]) / sy, abs=1e-6)


def test_out_of_bounds_is_an_error(image):
    with pytest.raises(OutOfBoundsError):
        bilinear_sample(image, (-0.1, 2))
    with pytest.raises(OutOfBoundsError):
        bilinear_sample(image, (3, 8.01))
    values, valid = image.sample(np.array([-1.0, 2.0]), np.array([1.0, 1.0]))
    assert list(valid) == [False, True]
    assert values[0] == 0.0


def test_rejects_bad_intensities():
    with pytest.raises(ValueError):
        RasterImage(np.full((3, 3), 1.5))
    with pytest.raises(ValueError):
        RasterImage(np.zeros(5))
    with pytest.raises(ValueError):
        RasterImage(np.array([[0.0, np.nan], [0.0, 0.0]]))


def test_image_is_immutable(image):
    with pytest.raises(ValueError):
        image.data[0, 0] = 0.5


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
@pytest.mark.parametrize("bits", [8, 16])
def test_write_read_roundtrip(tmp_path, image, suffix, bits):
    path = tmp_path / f"img{suffix}"
    write_image(image, path, bits=bits)
    back = read_image(path)
    assert back.shape == image.shape
    assert np.abs(back.data - image.data).max() <= 0.5 / (2**bits - 1) + 1e-12
