"""Supervised training and evaluation over serialized graph datasets.

Mini-batches are gradient accumulation across independent per-graph passes,
so graphs of different sizes train together without padding. Everything is
seeded: identical (manifest, config, seed) reproduce checkpoints and
metrics byte for byte.
"""

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import gcn
from .gcn import Gradients, ModelParams
from .graph import Histograph, deserialize

MANIFEST_HEADER = ["path", "label"]
_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class TrainingManifest:
    """Ordered (graph path, class id) records plus the class-name list."""

    entries: tuple
    classes: tuple

    def __post_init__(self):
        paths = [p for p, _ in self.entries]
        if len(paths) != len(set(paths)):
            raise ValueError("manifest paths must be unique")
        for p, label in self.entries:
            if not 0 <= label < len(self.classes):
                raise ValueError(f"label {label} for {p} out of range "
                                 f"({len(self.classes)} classes)")

    def labels_present(self) -> set[int]:
        return {label for _, label in self.entries}


def load_manifest(path) -> TrainingManifest:
    """Read a manifest CSV (header "path,label"); graph paths are resolved
    relative to the manifest's own directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    base = path.parent
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: expected header 'path,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}: line {lineno}: expected 2 fields")
            try:
                label = int(row[1])
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-integer label {row[1]!r}") from None
            if label < 0:
                raise ValueError(f"{path}: line {lineno}: negative label")
            p = Path(row[0])
            entries.append((str(p if p.is_absolute() else base / p), label))
    n_classes = max((label for _, label in entries), default=-1) + 1
    classes = tuple(str(i) for i in range(n_classes))
    return TrainingManifest(tuple(entries), classes)


def save_manifest(entries, path) -> None:
    """Write (path, label) rows under the standard header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for p, label in entries:
            writer.writerow([p, label])


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 300
    patience: int = 50
    conv_widths: tuple = gcn.DEFAULT_CONV_WIDTHS
    pool_k: int = gcn.DEFAULT_POOL_K
    dense_widths: tuple = gcn.DEFAULT_DENSE_WIDTHS

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, and patience must be >= 1")
        if self.pool_k < 1:
            raise ValueError("pool_k must be >= 1")
        if not self.conv_widths or any(w < 1 for w in self.conv_widths):
            raise ValueError("conv_widths must be positive")
        if any(w < 1 for w in self.dense_widths):
            raise ValueError("dense_widths must be positive")


@dataclass
class OptimizerState:
    """Adam moments congruent with the model's parameter tensors."""

    step: int
    m: list
    v: list
    lr: float
    beta1: float
    beta2: float
    epsilon: float

    @classmethod
    def init(cls, params: ModelParams, lr: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, epsilon: float = 1e-8) -> "OptimizerState":
        tensors = params.tensors()
        return cls(0, [np.zeros_like(t) for t in tensors],
                   [np.zeros_like(t) for t in tensors], lr, beta1, beta2, epsilon)


def adam_step(params: ModelParams, grads: Gradients, state: OptimizerState
              ) -> tuple[ModelParams, OptimizerState]:
    """One bias-corrected Adam update; returns new params and state."""
    tensors = params.tensors()
    if len(grads.tensors) != len(tensors):
        raise ValueError(f"shape mismatch: {len(grads.tensors)} gradient tensors for "
                         f"{len(tensors)} parameters")
    t = state.step + 1
    new_m, new_v, new_tensors = [], [], []
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(tensors, grads.tensors, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch: gradient {g.shape} for parameter {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        new_m.append(m)
        new_v.append(v)
        new_tensors.append(p - update)
    new_state = OptimizerState(t, new_m, new_v, state.lr, state.beta1, state.beta2,
                               state.epsilon)
    return params.replace_tensors(new_tensors), new_state


@dataclass(frozen=True)
class FeatureStats:
    """Per-dimension z-score statistics learned from training vertices."""

    mean: np.ndarray
    std: np.ndarray  # already floored at _STD_FLOOR


def standardize_features(graphs: list[Histograph]) -> FeatureStats:
    """Pool all vertices of the training graphs and fit per-dim mean/std."""
    if len(graphs) < 2:
        raise ValueError("need at least 2 training graphs for standardization")
    pooled = np.vstack([g.features.values for g in graphs])
    mean = pooled.mean(axis=0)
    std = np.maximum(pooled.std(axis=0), _STD_FLOOR)
    return FeatureStats(mean, std)


def apply_standardization(g: Histograph, stats: FeatureStats) -> Histograph:
    """A copy of the graph with z-scored vertex features."""
    values = (g.features.values - stats.mean) / stats.std
    return replace(g, features=replace(g.features, values=values))


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    model: ModelParams
    stats: FeatureStats
    log: list


def _load_graphs(manifest: TrainingManifest) -> tuple[list[Histograph], list[int]]:
    graphs, labels = [], []
    for path, label in manifest.entries:
        try:
            graphs.append(deserialize(path))
        except (OSError, ValueError) as err:
            raise ValueError(f"cannot load graph {path}: {err}") from err
        labels.append(label)
    return graphs, labels


def _prepare(graphs: list[Histograph], stats: FeatureStats) -> list[Histograph]:
    out = []
    for g in graphs:
        g = apply_standardization(g, stats)
        out.append(replace(g, adjacency=gcn.normalize_adjacency(g.adjacency)))
    return out


def train(manifest: TrainingManifest, config: TrainConfig = TrainConfig(),
          seed: int = 0, progress=None) -> TrainResult:
    """Fit the classifier on the manifest's graphs.

    Feature statistics come from the training pool only; the adjacency of
    each graph is row-normalized once at load. Training shuffles per epoch
    with a generator derived from `seed`, accumulates gradients over
    mini-batches, and stops early when the mean training loss has not
    improved for `config.patience` epochs.

    `progress`, if given, is called with each EpochRecord as it is logged.
    """
    if not manifest.entries:
        raise ValueError("manifest is empty")
    if len(manifest.labels_present()) < 2:
        raise ValueError(f"need at least 2 classes, manifest has {len(manifest.labels_present())}")

    raw_graphs, labels = _load_graphs(manifest)
    n_classes = len(manifest.classes)
    stats = standardize_features(raw_graphs)
    graphs = _prepare(raw_graphs, stats)

    feature_dim = graphs[0].features.f
    n_slices = graphs[0].adjacency.l
    model = gcn.build_model(feature_dim, n_classes, n_slices=n_slices,
                            conv_widths=config.conv_widths, pool_k=config.pool_k,
                            dense_widths=config.dense_widths,
                            seed=np.random.SeedSequence([seed, 0]))
    opt = OptimizerState.init(model, lr=config.lr, beta1=config.beta1,
                              beta2=config.beta2, epsilon=config.epsilon)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))

    log: list[EpochRecord] = []
    best_loss = np.inf
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(graphs))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            acc_grads = None
            for idx in batch:
                g = graphs[idx]
                logits = gcn.model_forward(g, model)
                loss, dlogits = gcn.softmax_cross_entropy(logits, labels[idx])
                grads = gcn.model_backward(g, model, dlogits)
                total_loss += loss
                correct += int(np.argmax(logits)) == labels[idx]
                if acc_grads is None:
                    acc_grads = grads.tensors
                else:
                    acc_grads = [a + b for a, b in zip(acc_grads, grads.tensors)]
            mean_grads = Gradients([t / len(batch) for t in acc_grads])
            model, opt = adam_step(model, mean_grads, opt)
        record = EpochRecord(epoch, total_loss / len(graphs), correct / len(graphs))
        log.append(record)
        if progress is not None:
            progress(record)
        if record.loss < best_loss:
            best_loss = record.loss
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return TrainResult(model, stats, log)


@dataclass
class MetricsReport:
    accuracy: float
    confusion: np.ndarray  # (C, C) counts, rows = true class
    precision: np.ndarray  # (C,)
    recall: np.ndarray  # (C,)
    loss: float

    def to_text(self) -> str:
        lines = [f"accuracy: {self.accuracy:.4f}", f"mean loss: {self.loss:.6f}",
                 "confusion (rows = true, cols = predicted):"]
        for row in self.confusion:
            lines.append("  " + " ".join(f"{int(c):6d}" for c in row))
        for c, (p, r) in enumerate(zip(self.precision, self.recall)):
            lines.append(f"class {c}: precision {p:.4f}  recall {r:.4f}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "loss": self.loss,
            "confusion": self.confusion.astype(int).tolist(),
            "precision": [float(p) for p in self.precision],
            "recall": [float(r) for r in self.recall],
        }


def evaluate(manifest: TrainingManifest, model: ModelParams, stats: FeatureStats
             ) -> MetricsReport:
    """Single deterministic pass: argmax-logit prediction per graph.

    Argmax ties resolve to the lower class id.
    """
    if not manifest.entries:
        raise ValueError("manifest is empty")
    raw_graphs, labels = _load_graphs(manifest)
    graphs = _prepare(raw_graphs, stats)
    c = model.n_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    total_loss = 0.0
    for g, label in zip(graphs, labels):
        logits = gcn.model_forward(g, model)
        loss, _ = gcn.softmax_cross_entropy(logits, label)
        total_loss += loss
        confusion[label, int(np.argmax(logits))] += 1
    total = confusion.sum()
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1)
    diag = np.diagonal(confusion)
    precision = np.where(predicted > 0, diag / np.maximum(predicted, 1), 0.0)
    recall = np.where(actual > 0, diag / np.maximum(actual, 1), 0.0)
    return MetricsReport(float(np.trace(confusion) / total), confusion, precision,
                         recall, total_loss / len(graphs))
