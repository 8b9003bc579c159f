"""Synthetic point-pattern datasets for end-to-end verification.

Two classes share one vertex-feature distribution (unit Gaussians) and
differ only in spatial macro-structure: "clustered" scatters points around
a handful of cluster centers, each wrapped in a sparse boundary ring, while
"dispersed" spreads points uniformly with a minimum separation. Any
classifier that separates them must therefore be reading graph structure,
not vertex features.
"""

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .detect import NucleusSet
from .graph import (
    DEFAULT_EDGE_RADIUS,
    FeatureSegment,
    Histograph,
    VertexFeatureMatrix,
    build_edges,
    serialize,
)
from .train import save_manifest

CLASS_NAMES = ("clustered", "dispersed")
FEATURE_DIM = 54
_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class SynthConfig:
    kind: str  # "clustered" | "dispersed"
    canvas: tuple[int, int] = (1024, 1024)
    n_points: tuple[int, int] = (150, 400)
    n_clusters: tuple[int, int] = (3, 8)
    cluster_radius: tuple[float, float] = (60.0, 140.0)
    ring_fraction: float = 0.3
    min_separation: float = 6.0
    feature_noise: float = 1.0
    edge_radius: float = DEFAULT_EDGE_RADIUS
    seed: object = 0  # anything numpy's default_rng accepts

    def __post_init__(self):
        if self.kind not in CLASS_NAMES:
            raise ValueError(f"kind must be one of {CLASS_NAMES}, got {self.kind!r}")
        if self.canvas[0] < 256 or self.canvas[1] < 256:
            raise ValueError("canvas must be at least 256x256")
        for name, (lo, hi) in [("n_points", self.n_points), ("n_clusters", self.n_clusters),
                               ("cluster_radius", self.cluster_radius)]:
            if lo > hi or lo < 1:
                raise ValueError(f"{name} range ({lo}, {hi}) is empty or non-positive")
        if not 0 <= self.ring_fraction <= 1:
            raise ValueError("ring_fraction must lie in [0, 1]")


def _place(cfg: SynthConfig, occupied: set, propose) -> tuple[int, int]:
    """Draw integer coordinates from `propose` until an unoccupied pixel lands
    inside the canvas."""
    w, h = cfg.canvas
    for _ in range(_PLACEMENT_TRIES):
        x, y = propose()
        x = int(np.clip(round(x), 0, w - 1))
        y = int(np.clip(round(y), 0, h - 1))
        if (x, y) not in occupied:
            occupied.add((x, y))
            return x, y
    raise ValueError("cannot place point: canvas too crowded")


def _clustered_points(rng: np.random.Generator, cfg: SynthConfig, n: int) -> np.ndarray:
    w, h = cfg.canvas
    k = int(rng.integers(cfg.n_clusters[0], cfg.n_clusters[1] + 1))
    centers = rng.uniform([0, 0], [w, h], size=(k, 2))
    radii = rng.uniform(cfg.cluster_radius[0], cfg.cluster_radius[1], size=k)
    counts = [n // k + (1 if i < n % k else 0) for i in range(k)]

    occupied: set = set()
    points = []
    for center, radius, count in zip(centers, radii, counts):
        n_ring = int(round(cfg.ring_fraction * count))
        for i in range(count):
            if i < n_ring:
                # boundary layer: points on the cluster rim with slight jitter
                def propose(center=center, radius=radius):
                    angle = rng.uniform(0, 2 * np.pi)
                    r = radius * (1.0 + 0.02 * rng.standard_normal())
                    return center[0] + r * np.cos(angle), center[1] + r * np.sin(angle)
            else:
                def propose(center=center, radius=radius):
                    offset = rng.normal(0.0, radius / 3.0, size=2)
                    return center[0] + offset[0], center[1] + offset[1]
            points.append(_place(cfg, occupied, propose))
    return np.array(points, dtype=np.int64)


def _dispersed_points(rng: np.random.Generator, cfg: SynthConfig, n: int) -> np.ndarray:
    w, h = cfg.canvas
    min_sq = cfg.min_separation ** 2
    accepted = np.empty((0, 2), dtype=np.float64)
    points = []
    attempts = 0
    budget = max(1000 * n, 10000)
    while len(points) < n:
        attempts += 1
        if attempts > budget:
            raise ValueError(
                f"cannot place {n} points with min separation {cfg.min_separation} "
                f"on canvas {w}x{h}"
            )
        x = int(rng.integers(0, w))
        y = int(rng.integers(0, h))
        if accepted.size:
            d2 = np.sum((accepted - (x, y)) ** 2, axis=1)
            if d2.min() < min_sq:
                continue
        points.append((x, y))
        accepted = np.vstack([accepted, [float(x), float(y)]])
    return np.array(points, dtype=np.int64)


def generate_graph(cfg: SynthConfig) -> Histograph:
    """One labeled synthetic graph; bit-identical for a fixed config."""
    rng = np.random.default_rng(cfg.seed)
    n = int(rng.integers(cfg.n_points[0], cfg.n_points[1] + 1))
    if cfg.kind == "clustered":
        coords = _clustered_points(rng, cfg, n)
    else:
        coords = _dispersed_points(rng, cfg, n)
    nuclei = NucleusSet(coords, source="synthetic")
    adjacency = build_edges(nuclei, radius=cfg.edge_radius)
    # class-agnostic features: the label is carried by structure alone
    values = rng.standard_normal((n, FEATURE_DIM)) * cfg.feature_noise
    features = VertexFeatureMatrix(values, (FeatureSegment("synthetic", 0, FEATURE_DIM),))
    label = CLASS_NAMES.index(cfg.kind)
    provenance = {
        "generator": "synth",
        "kind": cfg.kind,
        "canvas": list(cfg.canvas),
        "n_points": list(cfg.n_points),
        "n_clusters": list(cfg.n_clusters),
        "cluster_radius": list(cfg.cluster_radius),
        "ring_fraction": cfg.ring_fraction,
        "min_separation": cfg.min_separation,
        "feature_noise": cfg.feature_noise,
        "edge_radius": cfg.edge_radius,
    }
    return Histograph(nuclei, adjacency, features, label=label, provenance=provenance)


def generate_dataset(configs: tuple[SynthConfig, SynthConfig], n_per_class: int,
                     seed: int, out_dir, train_fraction: float = 0.75) -> dict:
    """Write a balanced two-class dataset plus manifests.

    Per-sample seeds derive from (seed, class id, sample index), so any
    sample can be regenerated independently. Emits every graph under
    graphs/, a full manifest.csv, and disjoint manifest_train.csv /
    manifest_test.csv split per class at `train_fraction`.

    Returns the written paths: {"manifest", "train", "test", "graphs"}.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    kinds = [cfg.kind for cfg in configs]
    if sorted(kinds) != sorted(CLASS_NAMES):
        raise ValueError(f"configs must cover classes {CLASS_NAMES}, got {kinds}")

    out_dir = Path(out_dir)
    graphs_dir = out_dir / "graphs"
    graphs_dir.mkdir(parents=True, exist_ok=True)

    entries = []  # (relative path, label)
    for cfg in configs:
        label = CLASS_NAMES.index(cfg.kind)
        for i in range(n_per_class):
            sample_cfg = replace(cfg, seed=[seed, label, i])
            g = generate_graph(sample_cfg)
            g = replace(g, provenance={**g.provenance, "master_seed": seed, "index": i})
            rel = f"graphs/{cfg.kind}_{i:03d}.json"
            serialize(g, out_dir / rel)
            entries.append((rel, label))

    split_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    train_entries, test_entries = [], []
    for label in (0, 1):
        class_entries = [e for e in entries if e[1] == label]
        order = split_rng.permutation(len(class_entries))
        n_train = int(round(train_fraction * len(class_entries)))
        train_entries += [class_entries[i] for i in order[:n_train]]
        test_entries += [class_entries[i] for i in order[n_train:]]

    paths = {
        "manifest": out_dir / "manifest.csv",
        "train": out_dir / "manifest_train.csv",
        "test": out_dir / "manifest_test.csv",
        "graphs": graphs_dir,
    }
    save_manifest(entries, paths["manifest"])
    save_manifest(train_entries, paths["train"])
    save_manifest(test_entries, paths["test"])
    return paths


def default_configs() -> tuple[SynthConfig, SynthConfig]:
    return SynthConfig(kind="clustered"), SynthConfig(kind="dispersed")
