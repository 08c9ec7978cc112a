"""Tests for CLAHE, resizing, decoding and augmentation."""

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from preprocess import (
    AugmentConfig,
    ImageFormatError,
    ImagePreprocessor,
    PreprocessConfig,
    PreprocessConfigError,
    augment,
    clahe,
    decode_image,
    resize_bilinear,
    to_network_input,
)
from utils import derive_rng


def _reference_lut(tile, clip, max_value=255):
    """Clipped, redistributed histogram CDF computed one bin at a time."""
    n_pixels = tile.size
    hist = [0] * 256
    for value in tile.ravel():
        hist[int(value)] += 1
    limit = max(1, int(clip * n_pixels / 256))
    excess = 0
    for i in range(256):
        if hist[i] > limit:
            excess += hist[i] - limit
            hist[i] = limit
    for i in range(256):
        hist[i] += excess // 256
    residual = excess % 256
    if residual:
        step = max(256 // residual, 1)
        for i in range(0, residual * step, step):
            hist[i] += 1
    lut, total = [], 0
    for i in range(256):
        total += hist[i]
        lut.append(float(np.rint(total * (max_value / n_pixels))))
    return lut


def _reference_clahe(image, clip, grid):
    h, w = image.shape
    rows, cols = grid
    tile_h, tile_w = h // rows, w // cols
    luts = [
        [
            _reference_lut(image[ty * tile_h : (ty + 1) * tile_h, tx * tile_w : (tx + 1) * tile_w], clip)
            for tx in range(cols)
        ]
        for ty in range(rows)
    ]

    def neighbours(pixel, tile, tiles):
        pos = pixel / tile - 0.5
        lo = math.floor(pos)
        weight = pos - lo
        return min(max(lo, 0), tiles - 1), min(max(lo + 1, 0), tiles - 1), weight

    out = np.empty_like(image)
    for y in range(h):
        y1, y2, wy = neighbours(y, tile_h, rows)
        for x in range(w):
            x1, x2, wx = neighbours(x, tile_w, cols)
            v = int(image[y, x])
            top = (1.0 - wx) * luts[y1][x1][v] + wx * luts[y1][x2][v]
            bottom = (1.0 - wx) * luts[y2][x1][v] + wx * luts[y2][x2][v]
            value = (1.0 - wy) * top + wy * bottom
            out[y, x] = min(max(np.rint(value), 0), 255)
    return out


@pytest.mark.slow
@pytest.mark.parametrize("clip", [1.5, 2.0, 4.0])
@pytest.mark.parametrize("grid", [(2, 2), (8, 8)])
def test_matches_reference(clip, grid):
    rng = np.random.default_rng(int(clip * 10) + grid[0])
    for _ in range(20):
        image = rng.integers(0, 256, size=(64, 64), dtype=np.uint8)
        assert np.array_equal(clahe(image, clip, grid), _reference_clahe(image, clip, grid))


def test_matches_reference_on_structured_image():
    yy, xx = np.mgrid[0:64, 0:64]
    image = ((yy * 2 + xx) % 97 + 60).astype(np.uint8)
    assert np.array_equal(clahe(image, 2.0, (8, 8)), _reference_clahe(image, 2.0, (8, 8)))


@pytest.mark.parametrize("value", [0, 17, 128, 255])
def test_constant_image_stays_constant(value):
    out = clahe(np.full((64, 64), value, dtype=np.uint8), 2.0, (8, 8))
    assert len(np.unique(out)) == 1


def test_preserves_shape_and_dtype(rng):
    image = rng.integers(0, 256, size=(50, 70), dtype=np.uint8)
    out = clahe(image, 2.0, (8, 8))
    assert out.shape == image.shape
    assert out.dtype == np.uint8


def test_sixteen_bit_input(rng):
    image = rng.integers(0, 65536, size=(32, 32), dtype=np.uint16)
    out = clahe(image, 2.0, (4, 4))
    assert out.dtype == np.uint16
    assert out.max() <= 65535


def test_stretches_low_contrast(rng):
    image = rng.integers(100, 110, size=(64, 64), dtype=np.uint8)
    out = clahe(image, 4.0, (2, 2))
    assert out.std() > image.std()


def test_invalid_parameters(rng):
    image = rng.integers(0, 256, size=(16, 16), dtype=np.uint8)
    with pytest.raises(PreprocessConfigError):
        clahe(image, 0.5, (2, 2))
    with pytest.raises(PreprocessConfigError):
        clahe(image, 2.0, (0, 2))
    with pytest.raises(PreprocessConfigError):
        clahe(image, 2.0, (32, 32))
    with pytest.raises(ImageFormatError):
        clahe(np.zeros((4, 4, 3), dtype=np.uint8))
    with pytest.raises(ImageFormatError):
        clahe(np.zeros((16, 16), dtype=np.float32))


def test_identity(rng):
    image = rng.uniform(0, 255, (20, 30))
    assert np.allclose(resize_bilinear(image, (20, 30)), image)


def test_constant_stays_constant():
    out = resize_bilinear(np.full((13, 7), 42.0), (32, 32))
    assert out.shape == (32, 32)
    assert np.allclose(out, 42.0)


def test_downscale_by_two_averages():
    image = np.arange(16, dtype=np.float64).reshape(4, 4)
    out = resize_bilinear(image, (2, 2))
    assert np.allclose(out, [[2.5, 4.5], [10.5, 12.5]])


@settings(max_examples=30, deadline=None)
@given(
    h=st.integers(2, 40),
    w=st.integers(2, 40),
    th=st.integers(1, 40),
    tw=st.integers(1, 40),
)
def test_stays_within_input_range(h, w, th, tw):
    image = np.random.default_rng(h * 100 + w).uniform(0, 1, (h, w))
    out = resize_bilinear(image, (th, tw))
    assert out.shape == (th, tw)
    assert out.min() >= image.min() - 1e-12
    assert out.max() <= image.max() + 1e-12


def test_invalid_target():
    with pytest.raises(PreprocessConfigError):
        resize_bilinear(np.zeros((4, 4)), (0, 4))


def _png(array, mode=None):
    buffer = io.BytesIO()
    Image.fromarray(array, mode=mode).save(buffer, format="PNG")
    return buffer.getvalue()


def test_grayscale_png(rng):
    pixels = rng.integers(0, 256, (10, 12), dtype=np.uint8)
    assert np.array_equal(decode_image(_png(pixels)), pixels)


def test_sixteen_bit_rescaled():
    pixels = np.array([[0, 65535]], dtype=np.uint16)
    out = decode_image(_png(pixels))
    assert out.dtype == np.uint8
    assert out.tolist() == [[0, 255]]


def test_color_rejected():
    with pytest.raises(ImageFormatError, match="grayscale"):
        decode_image(_png(np.zeros((4, 4, 3), dtype=np.uint8)))


def test_garbage_rejected():
    with pytest.raises(ImageFormatError):
        decode_image(b"not an image")


def test_path_input(tmp_path, rng):
    pixels = rng.integers(0, 256, (8, 8), dtype=np.uint8)
    path = tmp_path / "x.png"
    path.write_bytes(_png(pixels))
    assert np.array_equal(decode_image(path), pixels)


def test_output_tensor(rng):
    pre = ImagePreprocessor(PreprocessConfig(target_size=(32, 32)))
    out = pre.process(rng.integers(0, 256, (80, 60), dtype=np.uint8))
    assert out.shape == (3, 32, 32)
    assert out.min() >= 0.0
    assert out.max() <= 1.0
    assert np.array_equal(out[0], out[2])


def test_deterministic(rng):
    image = rng.integers(0, 256, (64, 64), dtype=np.uint8)
    pre = ImagePreprocessor(PreprocessConfig(target_size=(32, 32)))
    assert np.array_equal(pre.process(image), pre.process(image))


def test_clahe_disabled(rng):
    image = rng.integers(0, 256, (32, 32), dtype=np.uint8)
    pre = ImagePreprocessor(PreprocessConfig(clahe_enabled=False, target_size=(32, 32)))
    assert np.allclose(pre.process(image)[0], image / 255.0)


def test_dump_dir(tmp_path, rng):
    cfg = PreprocessConfig(target_size=(16, 16), dump_dir=str(tmp_path / "dump"))
    ImagePreprocessor(cfg).process(rng.integers(0, 256, (32, 32), dtype=np.uint8), name="a/b")
    dumped = list((tmp_path / "dump").iterdir())
    assert len(dumped) == 1
    with Image.open(dumped[0]) as img:
        assert img.size == (16, 16)


def test_config_validation():
    with pytest.raises(PreprocessConfigError):
        PreprocessConfig(clahe_clip=0.9)
    with pytest.raises(PreprocessConfigError):
        PreprocessConfig(target_size=(0, 10))


def test_config_dict_omits_dump_dir():
    data = PreprocessConfig(dump_dir="/tmp/x").to_dict()
    assert "dump_dir" not in data
    assert PreprocessConfig.from_dict(data) == PreprocessConfig()


def test_network_input_scaling():
    out = to_network_input(np.array([[0, 255]], dtype=np.uint8))
    assert out.shape == (3, 1, 2)
    assert out[1].tolist() == [[0.0, 1.0]]


def test_same_seed_same_output(rng):
    image = rng.uniform(0, 1, (32, 32))
    cfg = AugmentConfig()
    a, ops_a = augment(image, cfg, derive_rng(5, 17))
    b, ops_b = augment(image, cfg, derive_rng(5, 17))
    assert np.array_equal(a, b)
    assert ops_a == ops_b
    assert [op.op for op in ops_a] == ["hflip", "brightness_contrast", "random_crop"]


def test_different_index_differs(rng):
    image = rng.uniform(0, 1, (32, 32))
    a, _ = augment(image, AugmentConfig(), derive_rng(5, 1))
    b, _ = augment(image, AugmentConfig(), derive_rng(5, 2))
    assert not np.array_equal(a, b)


def test_disabled_is_identity(rng):
    image = rng.uniform(0, 1, (16, 16))
    out, ops = augment(image, AugmentConfig(enabled=False), derive_rng(0, 0))
    assert np.array_equal(out, image)
    assert ops == []


def test_parameters_within_ranges(rng):
    image = rng.uniform(0, 1, (32, 32))
    cfg = AugmentConfig(gain_range=(0.9, 1.1), bias_range=(-0.1, 0.1), crop_scale_range=(0.85, 1.0))
    for index in range(20):
        out, ops = augment(image, cfg, derive_rng(3, index))
        params = {op.op: op.params for op in ops}
        assert 0.9 <= params["brightness_contrast"]["gain"] <= 1.1
        assert -0.1 <= params["brightness_contrast"]["bias"] <= 0.1
        assert 0.85 <= params["random_crop"]["scale"] <= 1.0
        assert out.shape == image.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_forced_flip():
    image = np.tile(np.arange(8, dtype=np.float64), (8, 1))
    cfg = AugmentConfig(hflip_prob=1.0, gain_range=(1.0, 1.0), bias_range=(0.0, 0.0), crop_scale_range=(1.0, 1.0))
    out, _ = augment(image, cfg, derive_rng(0, 0))
    assert np.array_equal(out, image[:, ::-1])
