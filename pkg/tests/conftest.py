"""Shared builders for the test suite: random graphs, permutations, and
small synthetic images with known blob positions."""

import numpy as np
import pytest

from histograph.detect import NucleusSet
from histograph.graph import (
    AdjacencyTensor,
    FeatureSegment,
    Histograph,
    VertexFeatureMatrix,
    build_edges,
)
from histograph.imaging import RgbImage


def random_coords(rng, n, width=1024, height=1024):
    """n unique integer (x, y) points inside the canvas."""
    seen = set()
    out = []
    while len(out) < n:
        x = int(rng.integers(0, width))
        y = int(rng.integers(0, height))
        if (x, y) not in seen:
            seen.add((x, y))
            out.append((x, y))
    return np.array(out, dtype=np.int64)


def random_histograph(rng, n=None, f=8, radius=200.0, label=None):
    """A valid Histograph with radius-thresholded edges and random features."""
    if n is None:
        n = int(rng.integers(5, 40))
    nuclei = NucleusSet(random_coords(rng, n), source="synthetic")
    adjacency = build_edges(nuclei, radius=radius)
    values = rng.normal(size=(n, f))
    layout = (FeatureSegment("synthetic", 0, f),)
    features = VertexFeatureMatrix(values, layout)
    return Histograph(nuclei, adjacency, features, label=label,
                      provenance={"origin": "test"})


def permute_graph(g, perm):
    """Relabel vertices: new vertex i is old vertex perm[i]."""
    perm = np.asarray(perm)
    nuclei = NucleusSet(g.nuclei.coords[perm], source=g.nuclei.source)
    weights = g.adjacency.weights[perm][:, :, perm]
    features = VertexFeatureMatrix(g.features.values[perm], g.features.layout)
    return Histograph(nuclei, AdjacencyTensor(weights), features,
                      label=g.label, provenance=dict(g.provenance))


def blob_image(width=160, height=120, centers=(), blob_radius=6,
               background=(255, 255, 255), color=(60, 30, 120)):
    """White canvas with dark purple discs at the given (x, y) centers.

    The disc color is hematoxylin-like so stain deconvolution keeps it in
    the hematoxylin channel.
    """
    pixels = np.empty((height, width, 3), dtype=np.uint8)
    pixels[:] = np.array(background, dtype=np.uint8)
    yy, xx = np.mgrid[0:height, 0:width]
    for cx, cy in centers:
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= blob_radius ** 2
        pixels[mask] = np.array(color, dtype=np.uint8)
    return RgbImage(pixels)


def tissue_like_od(rng, shape=(64, 64)):
    """OD image mixed from the reference stains with many near-pure pixels.

    Per-pixel mixing weights are Beta(0.5, 0.5), U-shaped like real tissue
    where nuclei are mostly hematoxylin and stroma mostly eosin. Dense
    half-half mixtures would leave the stain directions unidentifiable for
    any factorization method.
    """
    from histograph.stain import StainMatrix

    m = StainMatrix.reference().columns
    t = rng.beta(0.5, 0.5, size=shape)
    s = rng.uniform(0.3, 1.2, size=shape)
    conc = np.stack([s * t, s * (1 - t)], axis=2)
    return conc @ m.T, conc, m


@pytest.fixture
def rng():
    return np.random.default_rng(20260823)
