"""Histograph assembly: distance-thresholded edges, vertex features, and a
versioned JSON container.

A Histograph ties together the nuclei of one image, a dense adjacency
tensor whose single slice holds edge weights w = 1 - d/radius for nucleus
pairs closer than `radius` pixels, and a vertex feature matrix concatenating
average RGB, two-direction GLCM texture, an optional externally supplied
embedding, and the vertex degree.
"""

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detect import NucleusSet
from .imaging import RgbImage, quantize, to_grayscale

CONTAINER_VERSION = 1
GLCM_LEVELS = 5
DEFAULT_EDGE_RADIUS = 100.0
DEFAULT_WINDOW = 71


@dataclass(frozen=True)
class AdjacencyTensor:
    """Dense (n, l, n) edge-weight tensor; slice l is weights[:, l, :]."""

    weights: np.ndarray

    def __post_init__(self):
        w = self.weights
        if w.ndim != 3 or w.shape[0] != w.shape[2]:
            raise ValueError(f"expected (n, l, n) weight tensor, got shape {w.shape}")

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def l(self) -> int:
        return self.weights.shape[1]

    def slice(self, l: int = 0) -> np.ndarray:
        return self.weights[:, l, :]


@dataclass(frozen=True)
class FeatureSegment:
    name: str
    offset: int
    length: int


@dataclass(frozen=True)
class VertexFeatureMatrix:
    """(n, f) feature matrix with named segments tiling the feature axis."""

    values: np.ndarray
    layout: tuple[FeatureSegment, ...]

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValueError(f"expected (n, f) feature matrix, got shape {v.shape}")
        expected = 0
        for seg in self.layout:
            if seg.offset != expected or seg.length < 1:
                raise ValueError(f"layout segments must tile [0, f): bad segment {seg}")
            expected += seg.length
        if expected != v.shape[1]:
            raise ValueError(
                f"layout covers {expected} dims but matrix has {v.shape[1]} features"
            )

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def f(self) -> int:
        return self.values.shape[1]

    def segment(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.values[:, seg.offset : seg.offset + seg.length]
        raise KeyError(f"no feature segment named {name!r}")


@dataclass(frozen=True)
class Histograph:
    """One image's nuclei graph: vertices, weighted edges, features, label."""

    nuclei: NucleusSet
    adjacency: AdjacencyTensor
    features: VertexFeatureMatrix
    label: int | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.nuclei)
        if not (n == self.adjacency.n == self.features.n):
            raise ValueError(
                f"vertex count mismatch: {n} nuclei, adjacency n={self.adjacency.n}, "
                f"features n={self.features.n}"
            )

    @property
    def n(self) -> int:
        return len(self.nuclei)


class EmbeddingProvider:
    """Serves one fixed-length external feature vector per nucleus index."""

    def __init__(self, vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ValueError(f"expected (n, e) embedding array, got shape {vectors.shape}")
        self.vectors = vectors

    @classmethod
    def zero(cls, n: int) -> "EmbeddingProvider":
        """A provider contributing no feature dimensions."""
        return cls(np.empty((n, 0)))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def lookup(self, index: int) -> np.ndarray:
        if not 0 <= index < len(self):
            raise IndexError(f"embedding lookup for vertex {index} of {len(self)}")
        return self.vectors[index]


def build_edges(nuclei: NucleusSet, radius: float = DEFAULT_EDGE_RADIUS) -> AdjacencyTensor:
    """Connect nucleus pairs strictly closer than `radius` pixels.

    Edge weight is 1 - d/radius, so touching nuclei get weight near 1 and
    weights fade linearly to 0 at the radius. The single-slice tensor is
    symmetric with a zero diagonal.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    coords = nuclei.coords.astype(np.float64)
    n = coords.shape[0]
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    weights = np.where(dist < radius, 1.0 - dist / radius, 0.0)
    np.fill_diagonal(weights, 0.0)
    return AdjacencyTensor(weights[:, None, :].copy())


def avg_rgb(patch) -> np.ndarray:
    """Mean R, G, B over the patch, scaled to [0, 1]."""
    pixels = patch.pixels if hasattr(patch, "pixels") else np.asarray(patch)
    return pixels.astype(np.float64).mean(axis=(0, 1)) / 255.0


def glcm_features(patch) -> np.ndarray:
    """Two 5x5 gray-level co-occurrence matrices, horizontal then vertical.

    The patch is converted to grayscale, quantized to 5 levels, and level
    pairs at offsets (dx, dy) = (1, 0) and (0, 1) are counted over all valid
    in-patch pairs. Each matrix is normalized to sum 1 (all-zero when the
    patch has no pairs in that direction) and flattened row-major, giving a
    50-dimensional vector.
    """
    levels = quantize(to_grayscale(patch), GLCM_LEVELS)
    out = np.zeros(2 * GLCM_LEVELS * GLCM_LEVELS)
    for d, (dx, dy) in enumerate([(1, 0), (0, 1)]):
        h, w = levels.shape
        a = levels[: h - dy, : w - dx]
        b = levels[dy:, dx:]
        if a.size == 0:
            continue
        pair_index = (a * GLCM_LEVELS + b).ravel()
        counts = np.bincount(pair_index, minlength=GLCM_LEVELS * GLCM_LEVELS)
        glcm = counts.astype(np.float64) / float(a.size)
        out[d * 25 : (d + 1) * 25] = glcm
    return out


def assemble_vertex_features(img: RgbImage, nuclei: NucleusSet, adj: AdjacencyTensor,
                             emb: EmbeddingProvider, window: int = DEFAULT_WINDOW
                             ) -> VertexFeatureMatrix:
    """Concatenate avg RGB (3), GLCM (50), embedding (E), and degree (1).

    Windows are reflected at image borders. The degree is the count of
    strictly positive off-diagonal entries in the vertex's row of adjacency
    slice 0.
    """
    if window % 2 == 0 or window < 1:
        raise ValueError("window must be odd")
    n = len(nuclei)
    if adj.n != n:
        raise ValueError(f"adjacency built for {adj.n} vertices but {n} nuclei given")
    e = emb.dim

    half = window // 2
    padded = np.pad(img.pixels, ((half, half), (half, half), (0, 0)), mode="reflect")

    f = 54 + e
    values = np.zeros((n, f))
    off_diag = adj.slice(0) > 0
    np.fill_diagonal(off_diag, False)
    degrees = off_diag.sum(axis=1)

    for i, (x, y) in enumerate(nuclei.coords):
        win = padded[y : y + window, x : x + window]
        values[i, 0:3] = avg_rgb(win)
        values[i, 3:53] = glcm_features(win)
        vec = np.asarray(emb.lookup(i), dtype=np.float64)
        if vec.shape != (e,):
            raise ValueError(f"embedding for vertex {i} has length {vec.size}, expected {e}")
        values[i, 53 : 53 + e] = vec
        values[i, 53 + e] = degrees[i]

    segments = [FeatureSegment("avg_rgb", 0, 3), FeatureSegment("glcm", 3, 50)]
    if e > 0:
        segments.append(FeatureSegment("embedding", 53, e))
    segments.append(FeatureSegment("degree", 53 + e, 1))
    return VertexFeatureMatrix(values, tuple(segments))


def load_embeddings_csv(path, n: int) -> EmbeddingProvider:
    """Read per-nucleus embedding vectors (header "e0,e1,...", one row per nucleus)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or any(h != f"e{i}" for i, h in enumerate(header)):
            raise ValueError(f"{path}: expected header 'e0,e1,...', got {header}")
        e = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != e:
                raise ValueError(
                    f"{path}: line {lineno}: ragged row ({len(row)} fields, expected {e})"
                )
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-numeric cell") from None
    if len(rows) != n:
        raise ValueError(f"{path}: row count mismatch: {len(rows)} rows for {n} nuclei")
    return EmbeddingProvider(np.array(rows, dtype=np.float64).reshape(n, e))


def _container_payload(g: Histograph) -> dict:
    w = g.adjacency.weights
    edges = []
    for l in range(g.adjacency.l):
        s = w[:, l, :]
        if np.max(np.abs(s - s.T), initial=0.0) != 0.0:
            raise ValueError(f"adjacency slice {l} is not symmetric")
        if np.any(np.diagonal(s) != 0.0):
            raise ValueError(f"adjacency slice {l} has a nonzero diagonal")
        if np.any(s < 0.0) or np.any(s > 1.0):
            raise ValueError(f"adjacency slice {l} has weights outside [0, 1]")
        ps, qs = np.nonzero(np.triu(s, k=1))
        for p, q in zip(ps, qs):
            edges.append([int(p), int(q), l, float(s[p, q])])
    return {
        "version": CONTAINER_VERSION,
        "n": g.n,
        "l": g.adjacency.l,
        "f": g.features.f,
        "layout": [
            {"name": s.name, "offset": s.offset, "length": s.length} for s in g.features.layout
        ],
        "source": g.nuclei.source,
        "coords": [[int(x), int(y)] for x, y in g.nuclei.coords],
        "features": [float(v) for v in g.features.values.ravel()],
        "edges": edges,
        "label": g.label,
        "provenance": g.provenance,
    }


def _payload_checksum(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def serialize(g: Histograph, path) -> None:
    """Write a Histograph to a versioned, checksummed JSON container."""
    payload = _container_payload(g)
    payload["checksum"] = _payload_checksum(payload)
    with open(path, "w") as fh:
        json.dump(payload, fh)


def deserialize(path) -> Histograph:
    """Read a container written by `serialize`, verifying version, checksum,
    and shape consistency before constructing anything."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as err:
        raise ValueError(f"{path}: corrupt graph container: {err}") from None

    if not isinstance(doc, dict) or "version" not in doc:
        raise ValueError(f"{path}: not a graph container")
    if doc["version"] != CONTAINER_VERSION:
        raise ValueError(
            f"{path}: unsupported container version {doc['version']} "
            f"(expected {CONTAINER_VERSION})"
        )
    required = {"n", "l", "f", "layout", "source", "coords", "features", "edges",
                "label", "provenance", "checksum"}
    missing = required - doc.keys()
    if missing:
        raise ValueError(f"{path}: missing container fields {sorted(missing)}")

    stored = doc["checksum"]
    payload = {k: v for k, v in doc.items() if k != "checksum"}
    if _payload_checksum(payload) != stored:
        raise ValueError(f"{path}: checksum mismatch")

    n, l, f = doc["n"], doc["l"], doc["f"]
    if len(doc["coords"]) != n:
        raise ValueError(f"{path}: shape mismatch: {len(doc['coords'])} coords for n={n}")
    if len(doc["features"]) != n * f:
        raise ValueError(
            f"{path}: shape mismatch: {len(doc['features'])} feature values for n*f={n * f}"
        )

    weights = np.zeros((n, l, n))
    for p, q, sl, w in doc["edges"]:
        if not (0 <= p < q < n) or not (0 <= sl < l):
            raise ValueError(f"{path}: shape mismatch: bad edge ({p}, {q}, {sl})")
        if not 0.0 <= w <= 1.0:
            raise ValueError(f"{path}: edge weight {w} outside [0, 1]")
        weights[p, sl, q] = w
        weights[q, sl, p] = w

    layout = tuple(
        FeatureSegment(s["name"], s["offset"], s["length"]) for s in doc["layout"]
    )
    features = VertexFeatureMatrix(
        np.array(doc["features"], dtype=np.float64).reshape(n, f), layout
    )
    nuclei = NucleusSet(np.array(doc["coords"], dtype=np.int64).reshape(n, 2),
                        source=doc["source"])
    return Histograph(nuclei, AdjacencyTensor(weights), features,
                      label=doc["label"], provenance=doc["provenance"])
