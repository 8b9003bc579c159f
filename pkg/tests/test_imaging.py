import numpy as np
import pytest
from PIL import Image

from histograph.imaging import (
    Patch,
    RgbImage,
    extract_patch,
    load_image,
    quantize,
    to_grayscale,
)


def grayscale_oracle(pixels):
    """Per-pixel Rec. 601 luma, rounded half-to-even like numpy's rint."""
    h, w, _ = pixels.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            r, g, b = (float(v) for v in pixels[i, j])
            out[i, j] = int(round(0.299 * r + 0.587 * g + 0.114 * b))
    return out


def test_rgbimage_validates_shape_and_dtype():
    with pytest.raises(ValueError):
        RgbImage(np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(ValueError):
        RgbImage(np.zeros((4, 4, 3), dtype=np.float64))
    img = RgbImage(np.zeros((2, 5, 3), dtype=np.uint8))
    assert (img.width, img.height) == (5, 2)


def test_load_image_roundtrip(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(21, 34, 3), dtype=np.uint8)
    p = tmp_path / "img.png"
    Image.fromarray(pixels).save(p)
    img = load_image(p)
    np.testing.assert_array_equal(img.pixels, pixels)

    tiff = tmp_path / "img.tiff"
    Image.fromarray(pixels).save(tiff)
    np.testing.assert_array_equal(load_image(tiff).pixels, pixels)


def test_load_image_drops_alpha(tmp_path, rng):
    rgba = rng.integers(0, 256, size=(7, 9, 4), dtype=np.uint8)
    p = tmp_path / "img.png"
    Image.fromarray(rgba, mode="RGBA").save(p)
    img = load_image(p)
    assert img.pixels.shape == (7, 9, 3)


def test_load_image_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="file not found"):
        load_image(tmp_path / "nope.png")
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"this is not an image")
    with pytest.raises(ValueError, match="cannot decode"):
        load_image(bad)


def test_extract_patch_interior(rng):
    pixels = rng.integers(0, 256, size=(30, 40, 3), dtype=np.uint8)
    img = RgbImage(pixels)
    patch = extract_patch(img, (20, 15), 5)
    assert patch.side == 5 and patch.center == (20, 15)
    np.testing.assert_array_equal(patch.pixels, pixels[13:18, 18:23])


def test_extract_patch_reflects_at_border():
    # 1x4 image with distinct columns; a 3-wide patch at x=0 must reflect
    # column 1 to the left, giving columns (1, 0, 1).
    pixels = np.zeros((1, 4, 3), dtype=np.uint8)
    pixels[0, :, 0] = [10, 20, 30, 40]
    img = RgbImage(pixels)
    patch = extract_patch(img, (0, 0), 3)
    assert list(patch.pixels[1, :, 0]) == [20, 10, 20]


def test_extract_patch_corner_matches_manual_reflection(rng):
    pixels = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    img = RgbImage(pixels)
    side = 5
    half = side // 2
    padded = np.pad(pixels, ((half, half), (half, half), (0, 0)), mode="reflect")
    for center in [(0, 0), (7, 0), (0, 7), (7, 7), (3, 6)]:
        x, y = center
        expected = padded[y : y + side, x : x + side]
        np.testing.assert_array_equal(extract_patch(img, center, side).pixels, expected)


def test_extract_patch_rejects_bad_inputs():
    img = RgbImage(np.zeros((10, 10, 3), dtype=np.uint8))
    with pytest.raises(ValueError, match="side must be odd"):
        extract_patch(img, (5, 5), 4)
    with pytest.raises(ValueError, match="outside image"):
        extract_patch(img, (10, 5), 3)
    with pytest.raises(ValueError, match="outside image"):
        extract_patch(img, (5, -1), 3)


def test_patch_requires_odd_square():
    with pytest.raises(ValueError):
        Patch(np.zeros((4, 4, 3), dtype=np.uint8), (0, 0))
    with pytest.raises(ValueError):
        Patch(np.zeros((3, 5, 3), dtype=np.uint8), (0, 0))


def test_to_grayscale_matches_pixelwise_oracle(rng):
    pixels = rng.integers(0, 256, size=(9, 11, 3), dtype=np.uint8)
    got = to_grayscale(pixels)
    np.testing.assert_array_equal(got, grayscale_oracle(pixels))
    assert got.dtype == np.uint8
    # also via a Patch wrapper
    patch = Patch(np.ascontiguousarray(pixels[:9, :9]), (4, 4))
    np.testing.assert_array_equal(to_grayscale(patch), grayscale_oracle(patch.pixels))


def test_to_grayscale_extremes():
    black = np.zeros((2, 2, 3), dtype=np.uint8)
    white = np.full((2, 2, 3), 255, dtype=np.uint8)
    assert to_grayscale(black).max() == 0
    assert to_grayscale(white).min() == 255


def test_quantize_boundaries():
    g = np.array([0, 51, 52, 102, 103, 153, 154, 204, 205, 255], dtype=np.uint8)
    np.testing.assert_array_equal(quantize(g, 5), [0, 0, 1, 1, 2, 2, 3, 3, 4, 4])
    assert quantize(np.array([255]), 5)[0] == 4
    assert quantize(np.array([0]), 5)[0] == 0


def test_quantize_covers_all_levels_uniformly():
    g = np.arange(256, dtype=np.uint8)
    q = quantize(g, 5)
    # floor(g * 5 / 256) level sizes: 52, 51, 51, 51, 51
    counts = np.bincount(q, minlength=5)
    assert list(counts) == [52, 51, 51, 51, 51]
    assert q.min() == 0 and q.max() == 4


def test_quantize_rejects_degenerate_levels():
    with pytest.raises(ValueError, match="levels"):
        quantize(np.zeros(3, dtype=np.uint8), 1)
