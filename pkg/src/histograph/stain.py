"""Optical-density conversion and H&E stain separation.

Nucleus detection runs on the hematoxylin concentration map. A fixed
reference absorbance matrix is the default; sparse-NMF estimation from the
image itself is available when the reference is a poor fit.
"""

from dataclasses import dataclass

import numpy as np

from .imaging import RgbImage

# Standard H&E absorbance directions (columns normalized to unit length in
# StainMatrix.reference): hematoxylin then eosin.
_REFERENCE_HE = np.array(
    [
        [0.65, 0.07],
        [0.70, 0.99],
        [0.29, 0.11],
    ]
)

# Pixels whose OD vector is shorter than this are treated as background.
_FOREGROUND_OD_CUTOFF = 0.15
_MIN_FOREGROUND_PIXELS = 100


@dataclass(frozen=True)
class StainMatrix:
    """3x2 absorbance matrix; column 0 is hematoxylin, column 1 eosin."""

    columns: np.ndarray

    def __post_init__(self):
        m = self.columns
        if m.shape != (3, 2):
            raise ValueError(f"expected 3x2 stain matrix, got shape {m.shape}")
        if np.any(m < 0):
            raise ValueError("stain absorbances must be nonnegative")
        norms = np.linalg.norm(m, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError(f"stain columns must have unit norm, got norms {norms}")

    @classmethod
    def reference(cls) -> "StainMatrix":
        """The fixed fallback H&E matrix."""
        m = _REFERENCE_HE / np.linalg.norm(_REFERENCE_HE, axis=0)
        return cls(m)

    @property
    def hematoxylin(self) -> np.ndarray:
        return self.columns[:, 0]

    @property
    def eosin(self) -> np.ndarray:
        return self.columns[:, 1]


@dataclass(frozen=True)
class ConcentrationMap:
    """Per-pixel nonnegative concentration of a single stain."""

    values: np.ndarray  # (height, width) float64

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"expected 2-D concentration map, got shape {self.values.shape}")
        if np.any(self.values < 0):
            raise ValueError("concentrations must be nonnegative")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def od_transform(img: RgbImage, background=(255, 255, 255)) -> np.ndarray:
    """Beer-Lambert optical density of each pixel against a background intensity.

    OD_c = -log10((I_c + 1) / (I0_c + 1)), clamped to >= 0. The +1 offsets
    keep fully absorbed (0) pixels finite. Returns (h, w, 3) float64.
    """
    i0 = np.asarray(background, dtype=np.float64)
    if i0.shape != (3,):
        raise ValueError("background must be a 3-channel intensity")
    if np.any(i0 < 1) or np.any(i0 > 255):
        raise ValueError("background channel values must lie in [1, 255]")
    intensity = img.pixels.astype(np.float64)
    od = -np.log10((intensity + 1.0) / (i0 + 1.0))
    return np.maximum(od, 0.0)


def deconvolve(od: np.ndarray, matrix: StainMatrix) -> tuple[ConcentrationMap, ConcentrationMap]:
    """Split an OD image into hematoxylin and eosin concentration maps.

    Per pixel, solves od ~= M @ c by least squares and clamps negative
    concentrations to zero.
    """
    m = matrix.columns
    smin = np.linalg.svd(m, compute_uv=False)[-1]
    if smin < 1e-8:
        raise ValueError("rank-deficient stain matrix")
    h, w, _ = od.shape
    flat = od.reshape(-1, 3)
    # pinv implements the least-squares solve for all pixels at once
    conc = flat @ np.linalg.pinv(m).T
    conc = np.maximum(conc, 0.0)
    hema = conc[:, 0].reshape(h, w)
    eosin = conc[:, 1].reshape(h, w)
    return ConcentrationMap(hema), ConcentrationMap(eosin)


def estimate_stain_matrix(od: np.ndarray, sparsity: float = 0.1, max_iter: int = 200,
                          tol: float = 1e-6, seed: int = 0) -> StainMatrix:
    """Estimate the two stain vectors from the image's own OD statistics.

    Runs a two-component multiplicative-update NMF with an L1 penalty on the
    concentrations, on the foreground pixels (OD norm above a background
    cutoff). The OD data is internally rescaled to unit mean norm so the
    result does not depend on overall exposure. The column closer to the
    reference hematoxylin direction is labeled hematoxylin.
    """
    flat = od.reshape(-1, 3)
    norms = np.linalg.norm(flat, axis=1)
    fg = flat[norms > _FOREGROUND_OD_CUTOFF]
    if fg.shape[0] < _MIN_FOREGROUND_PIXELS:
        raise ValueError(
            f"insufficient foreground: {fg.shape[0]} pixels above OD cutoff "
            f"(need {_MIN_FOREGROUND_PIXELS}); use the fixed reference matrix instead"
        )

    scale = float(np.mean(np.linalg.norm(fg, axis=1)))
    x = (fg / scale).T  # (3, P)

    rng = np.random.default_rng(seed)
    w = rng.uniform(0.1, 1.0, size=(3, 2))
    h = rng.uniform(0.1, 1.0, size=(2, x.shape[1]))
    w /= np.linalg.norm(w, axis=0)

    eps = 1e-12
    prev_obj = None
    for _ in range(max_iter):
        # L1 penalty on concentrations enters the H update denominator
        h *= (w.T @ x) / (w.T @ w @ h + sparsity + eps)
        w *= (x @ h.T) / (w @ h @ h.T + eps)
        col_norms = np.linalg.norm(w, axis=0)
        col_norms = np.maximum(col_norms, eps)
        w /= col_norms
        h *= col_norms[:, None]

        resid = x - w @ h
        obj = 0.5 * float(np.sum(resid * resid)) + sparsity * float(np.sum(h))
        if prev_obj is not None and abs(prev_obj - obj) <= tol * max(prev_obj, eps):
            break
        prev_obj = obj

    if np.min(np.linalg.norm(w, axis=0)) < 1e-6:
        raise ValueError("degenerate stain estimate: a stain component vanished")
    cos = float(w[:, 0] @ w[:, 1])
    if cos > 0.995:
        raise ValueError(
            "degenerate stain estimate: components nearly parallel (single-stain image?)"
        )

    ref_h = StainMatrix.reference().hematoxylin
    if w[:, 1] @ ref_h > w[:, 0] @ ref_h:
        w = w[:, ::-1]
    return StainMatrix(np.ascontiguousarray(np.maximum(w, 0.0)))


def concentration_to_png(cmap: ConcentrationMap, path) -> None:
    """Write a concentration map as an 8-bit grayscale PNG (visualization only).

    Values are min-max scaled to [0, 255]; a constant map writes as zeros.
    """
    from PIL import Image

    v = cmap.values
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        scaled = (v - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(v)
    Image.fromarray(np.rint(scaled).astype(np.uint8), mode="L").save(path)
