"""Vertex-set production: classical blob detection plus CSV ingestion.

The detector smooths the hematoxylin concentration map, keeps local maxima
above a relative threshold, and applies greedy strongest-first suppression
so no two detections fall within `min_distance` of each other. External
detectors can feed coordinates in through the nuclei CSV format instead.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .stain import ConcentrationMap

NUCLEI_CSV_HEADER = ["x", "y"]


@dataclass(frozen=True)
class NucleusSet:
    """Ordered (x, y) pixel coordinates of the nuclei found in one image."""

    coords: np.ndarray  # (n, 2) int64, columns x then y
    source: str = "detected"  # detected | imported | synthetic

    def __post_init__(self):
        c = self.coords
        if c.ndim != 2 or c.shape[1] != 2:
            raise ValueError(f"expected (n, 2) coordinate array, got shape {c.shape}")
        if len(c) != len({(int(x), int(y)) for x, y in c}):
            raise ValueError("duplicate nucleus coordinates")

    def __len__(self) -> int:
        return self.coords.shape[0]


def detect_nuclei(hema: ConcentrationMap, sigma: float = 3.0,
                  peak_threshold: float = 0.2, min_distance: int = 10) -> NucleusSet:
    """Detect nucleus centers as suppressed local maxima of the smoothed map.

    The map is Gaussian-smoothed with standard deviation `sigma`; local
    maxima at or above peak_threshold * (global max) are candidates.
    Candidates are visited strongest first (ties: smaller y, then smaller x)
    and any candidate within `min_distance` Euclidean pixels of an accepted
    one is dropped. Returned coordinates are sorted row-major (y, then x).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not 0 < peak_threshold < 1:
        raise ValueError("peak_threshold must lie strictly between 0 and 1")
    if min_distance < 1:
        raise ValueError("min_distance must be >= 1")

    smoothed = ndimage.gaussian_filter(hema.values, sigma=sigma, mode="reflect")
    gmax = float(smoothed.max())
    if gmax <= 0:
        return NucleusSet(np.empty((0, 2), dtype=np.int64))

    # a pixel is a local maximum if it equals the max over its 3x3 neighborhood
    neighborhood_max = ndimage.maximum_filter(smoothed, size=3, mode="reflect")
    is_peak = (smoothed == neighborhood_max) & (smoothed >= peak_threshold * gmax)
    ys, xs = np.nonzero(is_peak)
    if ys.size == 0:
        return NucleusSet(np.empty((0, 2), dtype=np.int64))

    values = smoothed[ys, xs]
    order = np.lexsort((xs, ys, -values))  # strongest first, then smaller y, then x

    accepted_x: list[int] = []
    accepted_y: list[int] = []
    min_sq = float(min_distance) ** 2
    for i in order:
        x, y = int(xs[i]), int(ys[i])
        ok = True
        for ax, ay in zip(accepted_x, accepted_y):
            dx = ax - x
            dy = ay - y
            if dx * dx + dy * dy < min_sq:
                ok = False
                break
        if ok:
            accepted_x.append(x)
            accepted_y.append(y)

    coords = np.array(sorted(zip(accepted_x, accepted_y), key=lambda c: (c[1], c[0])),
                      dtype=np.int64).reshape(-1, 2)
    return NucleusSet(coords)


def load_nuclei_csv(path, bounds: tuple[int, int]) -> NucleusSet:
    """Read a nuclei CSV (header "x,y") and validate against image bounds.

    Rows are kept in file order. Malformed rows, out-of-bounds coordinates,
    and duplicates raise ValueError naming the offending line number.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    w, h = bounds
    coords: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != NUCLEI_CSV_HEADER:
            raise ValueError(f"{path}: line 1: expected header 'x,y', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}: line {lineno}: expected 2 fields, got {len(row)}")
            try:
                x, y = int(row[0]), int(row[1])
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-integer coordinate {row}") from None
            if not (0 <= x < w and 0 <= y < h):
                raise ValueError(
                    f"{path}: line {lineno}: coordinate ({x}, {y}) outside bounds {w}x{h}"
                )
            if (x, y) in seen:
                raise ValueError(f"{path}: line {lineno}: duplicate coordinate ({x}, {y})")
            seen.add((x, y))
            coords.append((x, y))
    arr = np.array(coords, dtype=np.int64).reshape(-1, 2)
    return NucleusSet(arr, source="imported")


def save_nuclei_csv(nuclei: NucleusSet, path) -> None:
    """Write nuclei as CSV with header "x,y", one row per nucleus in stored order."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(NUCLEI_CSV_HEADER)
        for x, y in nuclei.coords:
            writer.writerow([int(x), int(y)])
