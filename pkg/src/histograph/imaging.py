"""Image loading, nucleus-centered patch extraction, and gray-level quantization.

Everything here is a pure function of its inputs; images and patches are
thin wrappers around uint8 numpy arrays so downstream feature code can
slice them directly.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

# Rec. 601 luma weights, the usual RGB -> gray convention.
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class RgbImage:
    """8-bit RGB raster, shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"expected (h, w, 3) pixel array, got shape {p.shape}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if p.dtype != np.uint8:
            raise ValueError(f"expected uint8 pixels, got {p.dtype}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class Patch:
    """Odd-sided square RGB window centered on a source-image coordinate."""

    pixels: np.ndarray  # (side, side, 3) uint8
    center: tuple[int, int]  # (x, y) in the source image

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[0] != p.shape[1] or p.shape[2] != 3:
            raise ValueError(f"expected square (side, side, 3) patch, got shape {p.shape}")
        if p.shape[0] % 2 == 0:
            raise ValueError("side must be odd")

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


def load_image(path) -> RgbImage:
    """Load a PNG or TIFF file as an RgbImage, dropping any alpha channel.

    Raises FileNotFoundError for missing paths and ValueError for files that
    do not decode as a raster image.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except UnidentifiedImageError as e:
        raise ValueError(f"cannot decode image: {path}") from e
    if arr.size == 0:
        raise ValueError(f"zero-sized image: {path}")
    return RgbImage(arr)


def extract_patch(img: RgbImage, center: tuple[int, int], side: int) -> Patch:
    """Cut a side x side window centered at (x, y).

    Coordinates falling outside the image are filled by reflecting the image
    about its border, so patches near edges carry no artificial black texture.
    """
    if side % 2 == 0 or side < 1:
        raise ValueError("side must be odd")
    x, y = center
    if not (0 <= x < img.width and 0 <= y < img.height):
        raise ValueError(f"center ({x}, {y}) outside image {img.width}x{img.height}")
    half = side // 2
    padded = np.pad(img.pixels, ((half, half), (half, half), (0, 0)), mode="reflect")
    window = padded[y : y + side, x : x + side]
    return Patch(np.ascontiguousarray(window), (x, y))


def to_grayscale(patch) -> np.ndarray:
    """Luma grayscale of an RGB patch (or raw (h, w, 3) array), uint8."""
    pixels = patch.pixels if hasattr(patch, "pixels") else np.asarray(patch)
    g = pixels.astype(np.float64) @ _LUMA_WEIGHTS
    return np.clip(np.rint(g), 0, 255).astype(np.uint8)


def quantize(gray: np.ndarray, levels: int) -> np.ndarray:
    """Uniformly bin 8-bit gray values into `levels` integer levels.

    level = floor(g * levels / 256), so 0 -> 0 and 255 -> levels - 1.
    """
    if levels < 2:
        raise ValueError(f"levels must be >= 2, got {levels}")
    g = np.asarray(gray, dtype=np.int64)
    return (g * levels) // 256
