"""From-scratch spatial graph convolution network for whole-graph classification.

Layers operate on a vertex feature matrix and an adjacency tensor and are
written directly in numpy with hand-derived backward passes:

* graph convolution: out = v @ taps[0] + sum_l (a_l @ v) @ taps[l+1] + bias,
  where tap 0 plays the role of an identity relation (no n x n identity is
  ever materialized);
* embed pooling: a learned row-softmax soft assignment S of the n vertices
  onto k pooled vertices, giving fixed-size output S^T v and pooled
  adjacency S^T a_l S (re-symmetrized) for any input graph size;
* flatten + dense layers map the pooled k x f block to class logits.

Gradient correctness is the module's central contract; every backward here
is checked against central finite differences in the test suite.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .graph import AdjacencyTensor, Histograph

CHECKPOINT_MAGIC = b"HGCN"
CHECKPOINT_VERSION = 1

DEFAULT_CONV_WIDTHS = (64, 32)
DEFAULT_POOL_K = 8
DEFAULT_DENSE_WIDTHS = (32,)


@dataclass
class GraphConvParams:
    taps: np.ndarray  # (l + 1, f_in, f_out); tap 0 is the identity relation
    bias: np.ndarray  # (f_out,)

    @property
    def n_slices(self) -> int:
        return self.taps.shape[0] - 1

    @property
    def f_in(self) -> int:
        return self.taps.shape[1]

    @property
    def f_out(self) -> int:
        return self.taps.shape[2]


@dataclass
class EmbedPoolParams:
    w: np.ndarray  # (f_in, k)

    @property
    def f_in(self) -> int:
        return self.w.shape[0]

    @property
    def k(self) -> int:
        return self.w.shape[1]


@dataclass
class DenseParams:
    w: np.ndarray  # (d_in, d_out)
    bias: np.ndarray  # (d_out,)


@dataclass
class Relu:
    pass


@dataclass
class Flatten:
    pass


@dataclass
class ModelParams:
    """Ordered layer stack ending in `n_classes` logits.

    Holds the cache of the most recent forward pass so the backward pass can
    reuse activations; the cache never takes part in equality or
    serialization.
    """

    layers: list
    n_classes: int
    _cache: dict | None = field(default=None, repr=False, compare=False)

    @property
    def input_dim(self) -> int:
        for layer in self.layers:
            if isinstance(layer, GraphConvParams):
                return layer.f_in
            if isinstance(layer, EmbedPoolParams):
                return layer.f_in
        raise ValueError("model has no graph layers")

    @property
    def n_slices(self) -> int:
        for layer in self.layers:
            if isinstance(layer, GraphConvParams):
                return layer.n_slices
        return 1

    def tensors(self) -> list[np.ndarray]:
        """All parameter arrays in declaration order."""
        out = []
        for layer in self.layers:
            if isinstance(layer, GraphConvParams):
                out.extend([layer.taps, layer.bias])
            elif isinstance(layer, EmbedPoolParams):
                out.append(layer.w)
            elif isinstance(layer, DenseParams):
                out.extend([layer.w, layer.bias])
        return out

    def tensor_names(self) -> list[str]:
        names = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, GraphConvParams):
                names.extend([f"layer{i}.taps", f"layer{i}.bias"])
            elif isinstance(layer, EmbedPoolParams):
                names.append(f"layer{i}.w")
            elif isinstance(layer, DenseParams):
                names.extend([f"layer{i}.w", f"layer{i}.bias"])
        return names

    def replace_tensors(self, tensors: list[np.ndarray]) -> "ModelParams":
        """A new ModelParams with the same structure and the given arrays."""
        it = iter(tensors)
        layers = []
        for layer in self.layers:
            if isinstance(layer, GraphConvParams):
                layers.append(GraphConvParams(next(it), next(it)))
            elif isinstance(layer, EmbedPoolParams):
                layers.append(EmbedPoolParams(next(it)))
            elif isinstance(layer, DenseParams):
                layers.append(DenseParams(next(it), next(it)))
            else:
                layers.append(layer)
        leftovers = sum(1 for _ in it)
        if leftovers:
            raise ValueError(f"{leftovers} extra tensors for model structure")
        return ModelParams(layers, self.n_classes)


@dataclass
class Gradients:
    """One gradient array per parameter tensor, in ModelParams order."""

    tensors: list


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int
            ) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_model(feature_dim: int, n_classes: int, n_slices: int = 1,
                conv_widths=DEFAULT_CONV_WIDTHS, pool_k: int = DEFAULT_POOL_K,
                dense_widths=DEFAULT_DENSE_WIDTHS, seed: int = 0) -> ModelParams:
    """Assemble the default stack: conv(+ReLU) blocks, one embed pool,
    flatten, dense(+ReLU) blocks, and a final dense layer to the logits.

    Weights are Glorot-uniform from a generator seeded with `seed`; biases
    start at zero.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if pool_k < 1:
        raise ValueError("pool_k must be >= 1")
    rng = np.random.default_rng(seed)
    layers: list = []
    width = feature_dim
    for cw in conv_widths:
        taps = np.stack(
            [_glorot(rng, (width, cw), width, cw) for _ in range(n_slices + 1)]
        )
        layers.append(GraphConvParams(taps, np.zeros(cw)))
        layers.append(Relu())
        width = cw
    layers.append(EmbedPoolParams(_glorot(rng, (width, pool_k), width, pool_k)))
    layers.append(Flatten())
    width = width * pool_k
    for dw in dense_widths:
        layers.append(DenseParams(_glorot(rng, (width, dw), width, dw), np.zeros(dw)))
        layers.append(Relu())
        width = dw
    layers.append(DenseParams(_glorot(rng, (width, n_classes), width, n_classes),
                              np.zeros(n_classes)))
    return ModelParams(layers, n_classes)


def normalize_adjacency(a: AdjacencyTensor) -> AdjacencyTensor:
    """Row-normalize every slice; zero rows stay zero."""
    w = a.weights
    rowsums = w.sum(axis=2, keepdims=True)
    return AdjacencyTensor(w / np.maximum(rowsums, 1e-12))


# ---------------------------------------------------------------------------
# layer forward / backward on raw arrays
# ---------------------------------------------------------------------------

def _conv_forward(adj: np.ndarray, v: np.ndarray, p: GraphConvParams):
    if v.shape[1] != p.f_in:
        raise ValueError(f"shape mismatch: features have width {v.shape[1]}, "
                         f"conv expects {p.f_in}")
    if adj.shape[1] != p.n_slices:
        raise ValueError(f"shape mismatch: adjacency has {adj.shape[1]} slices, "
                         f"conv expects {p.n_slices}")
    propagated = [adj[:, l, :] @ v for l in range(p.n_slices)]
    out = v @ p.taps[0]
    for l, m in enumerate(propagated):
        out += m @ p.taps[l + 1]
    out += p.bias
    cache = {"adj": adj, "v": v, "propagated": propagated}
    return out, cache


def _conv_backward(dout: np.ndarray, p: GraphConvParams, cache: dict):
    adj, v, propagated = cache["adj"], cache["v"], cache["propagated"]
    dtaps = np.empty_like(p.taps)
    dtaps[0] = v.T @ dout
    dbias = dout.sum(axis=0)
    dv = dout @ p.taps[0].T
    dadj = np.empty_like(adj)
    for l, m in enumerate(propagated):
        dtaps[l + 1] = m.T @ dout
        back = dout @ p.taps[l + 1].T  # d(loss)/d(a_l @ v)
        dv += adj[:, l, :].T @ back
        dadj[:, l, :] = back @ v.T
    return dv, dadj, [dtaps, dbias]


def _pool_forward(adj: np.ndarray, v: np.ndarray, p: EmbedPoolParams):
    if v.shape[1] != p.f_in:
        raise ValueError(f"shape mismatch: features have width {v.shape[1]}, "
                         f"pool expects {p.f_in}")
    z = v @ p.w
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)  # (n, k), rows sum to 1
    v2 = s.T @ v
    n_slices = adj.shape[1]
    k = p.k
    adj2 = np.empty((k, n_slices, k))
    for l in range(n_slices):
        b = s.T @ adj[:, l, :] @ s
        adj2[:, l, :] = 0.5 * (b + b.T)
    cache = {"adj": adj, "v": v, "s": s}
    return v2, adj2, cache


def _pool_backward(dv2: np.ndarray, dadj2, p: EmbedPoolParams, cache: dict):
    adj, v, s = cache["adj"], cache["v"], cache["s"]
    ds = v @ dv2.T
    dv = s @ dv2
    dadj = np.zeros_like(adj)
    if dadj2 is not None:
        for l in range(adj.shape[1]):
            db = 0.5 * (dadj2[:, l, :] + dadj2[:, l, :].T)
            a_l = adj[:, l, :]
            ds += a_l @ s @ db.T + a_l.T @ s @ db
            dadj[:, l, :] = s @ db @ s.T
    # row-softmax backward
    dz = s * (ds - (ds * s).sum(axis=1, keepdims=True))
    dw = v.T @ dz
    dv += dz @ p.w.T
    return dv, dadj, [dw]


def _dense_forward(x: np.ndarray, p: DenseParams):
    if x.shape[0] != p.w.shape[0]:
        raise ValueError(f"shape mismatch: input width {x.shape[0]}, "
                         f"dense expects {p.w.shape[0]}")
    return x @ p.w + p.bias, {"x": x}


def _dense_backward(dout: np.ndarray, p: DenseParams, cache: dict):
    x = cache["x"]
    return p.w @ dout, [np.outer(x, dout), dout.copy()]


def _run_forward(adj: np.ndarray, v: np.ndarray, m: ModelParams):
    """Thread (features, adjacency) through the layer stack, caching per layer."""
    x = v
    caches = []
    for layer in m.layers:
        if isinstance(layer, GraphConvParams):
            x, cache = _conv_forward(adj, x, layer)
            caches.append(cache)
        elif isinstance(layer, Relu):
            caches.append({"mask": x > 0})
            x = np.maximum(x, 0.0)
        elif isinstance(layer, EmbedPoolParams):
            x, adj, cache = _pool_forward(adj, x, layer)
            caches.append(cache)
        elif isinstance(layer, Flatten):
            caches.append({"shape": x.shape, "adj_shape": adj.shape})
            x = x.reshape(-1)
            adj = None
        elif isinstance(layer, DenseParams):
            x, cache = _dense_forward(x, layer)
            caches.append(cache)
        else:
            raise ValueError(f"unknown layer {layer!r}")
    if x.shape != (m.n_classes,):
        raise ValueError(f"model produced shape {x.shape}, expected ({m.n_classes},) logits")
    return x, caches


def _run_backward(dlogits: np.ndarray, m: ModelParams, caches: list) -> Gradients:
    dx = dlogits
    dadj = None
    grads_per_layer: list[list[np.ndarray]] = []
    for layer, cache in zip(reversed(m.layers), reversed(caches)):
        if isinstance(layer, GraphConvParams):
            dv, dadj_own, grads = _conv_backward(dx, layer, cache)
            dx = dv
            dadj = dadj_own if dadj is None else dadj + dadj_own
            grads_per_layer.append(grads)
        elif isinstance(layer, Relu):
            dx = dx * cache["mask"]
        elif isinstance(layer, EmbedPoolParams):
            dv, dadj, grads = _pool_backward(dx, dadj, layer, cache)
            dx = dv
            grads_per_layer.append(grads)
        elif isinstance(layer, Flatten):
            dx = dx.reshape(cache["shape"])
            dadj = None  # nothing downstream of a flatten consumes adjacency
        elif isinstance(layer, DenseParams):
            dx, grads = _dense_backward(dx, layer, cache)
            grads_per_layer.append(grads)
    flat: list[np.ndarray] = []
    for grads in reversed(grads_per_layer):
        flat.extend(grads)
    return Gradients(flat)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def graph_conv_forward(a_hat: AdjacencyTensor, v: np.ndarray, p: GraphConvParams
                       ) -> np.ndarray:
    """One spatial graph convolution over an (already normalized) adjacency."""
    out, _ = _conv_forward(a_hat.weights, np.asarray(v, dtype=np.float64), p)
    return out


def embed_pool_forward(a_hat: AdjacencyTensor, v: np.ndarray, p: EmbedPoolParams
                       ) -> tuple[np.ndarray, AdjacencyTensor]:
    """Soft-assign n vertices onto k pooled vertices; returns (k, f) features
    and the pooled (k, l, k) adjacency."""
    v2, adj2, _ = _pool_forward(a_hat.weights, np.asarray(v, dtype=np.float64), p)
    return v2, AdjacencyTensor(adj2)


def model_forward(g: Histograph, m: ModelParams) -> np.ndarray:
    """Class logits for one graph; caches activations on `m` for backward."""
    if g.features.f != m.input_dim:
        raise ValueError(f"width mismatch: graph features f={g.features.f} but model "
                         f"expects {m.input_dim}")
    logits, caches = _run_forward(g.adjacency.weights, g.features.values, m)
    m._cache = {"graph": g, "caches": caches}
    return logits


def model_backward(g: Histograph, m: ModelParams, upstream: np.ndarray) -> Gradients:
    """Gradients of the loss w.r.t. every parameter tensor, given the loss
    gradient on the logits. Requires a prior model_forward on the same graph."""
    if m._cache is None or m._cache["graph"] is not g:
        raise ValueError("missing forward cache: call model_forward on this graph first")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (m.n_classes,):
        raise ValueError(f"upstream gradient has shape {upstream.shape}, "
                         f"expected ({m.n_classes},)")
    return _run_backward(upstream, m, m._cache["caches"])


def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Stable cross-entropy of softmax(logits) against a class id.

    Returns the loss and its gradient on the logits (softmax - onehot).
    """
    logits = np.asarray(logits, dtype=np.float64)
    c = logits.shape[0]
    if not 0 <= label < c:
        raise ValueError(f"label {label} out of range for {c} classes")
    shifted = logits - logits.max()
    log_z = np.log(np.sum(np.exp(shifted)))
    loss = float(log_z - shifted[label])
    dlogits = np.exp(shifted - log_z)
    dlogits[label] -= 1.0
    return loss, dlogits


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def _layer_specs(m: ModelParams) -> list[dict]:
    specs = []
    for layer in m.layers:
        if isinstance(layer, GraphConvParams):
            specs.append({"kind": "graph_conv", "slices": layer.n_slices,
                          "in": layer.f_in, "out": layer.f_out})
        elif isinstance(layer, Relu):
            specs.append({"kind": "relu"})
        elif isinstance(layer, EmbedPoolParams):
            specs.append({"kind": "embed_pool", "in": layer.f_in, "k": layer.k})
        elif isinstance(layer, Flatten):
            specs.append({"kind": "flatten"})
        elif isinstance(layer, DenseParams):
            specs.append({"kind": "dense", "in": layer.w.shape[0], "out": layer.w.shape[1]})
    return specs


def _layers_from_specs(specs: list[dict]) -> list:
    layers: list = []
    for spec in specs:
        kind = spec["kind"]
        if kind == "graph_conv":
            layers.append(GraphConvParams(
                np.zeros((spec["slices"] + 1, spec["in"], spec["out"])),
                np.zeros(spec["out"])))
        elif kind == "relu":
            layers.append(Relu())
        elif kind == "embed_pool":
            layers.append(EmbedPoolParams(np.zeros((spec["in"], spec["k"]))))
        elif kind == "flatten":
            layers.append(Flatten())
        elif kind == "dense":
            layers.append(DenseParams(np.zeros((spec["in"], spec["out"])),
                                      np.zeros(spec["out"])))
        else:
            raise ValueError(f"unknown layer kind {kind!r} in checkpoint")
    return layers


def save_checkpoint(path, m: ModelParams, extra: dict | None = None,
                    meta: dict | None = None) -> None:
    """Write the model (plus named extra tensors, e.g. feature statistics) as
    a versioned binary: magic, header JSON, little-endian float64 tensors in
    declaration order, and a trailing SHA-256 checksum.
    """
    extra = extra or {}
    header = {
        "n_classes": m.n_classes,
        "layers": _layer_specs(m),
        "tensors": [{"name": n, "shape": list(t.shape)}
                    for n, t in zip(m.tensor_names(), m.tensors())],
        "extra": [{"name": n, "shape": list(np.asarray(t).shape)}
                  for n, t in extra.items()],
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    for t in m.tensors():
        blob += np.ascontiguousarray(t, dtype="<f8").tobytes()
    for name in extra:
        blob += np.ascontiguousarray(extra[name], dtype="<f8").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> tuple[ModelParams, dict, dict]:
    """Read a checkpoint back as (model, extra tensors, meta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 44 or blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    digest = blob[-32:]
    body = blob[:-32]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checkpoint checksum mismatch")
    version = struct.unpack("<I", body[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header_len = struct.unpack("<I", body[8:12])[0]
    header = json.loads(body[12 : 12 + header_len].decode())
    offset = 12 + header_len

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(body):
            raise ValueError(f"{path}: checkpoint truncated")
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += nbytes
        return arr.astype(np.float64)

    skeleton = ModelParams(_layers_from_specs(header["layers"]), header["n_classes"])
    tensors = []
    for decl, spec in zip(skeleton.tensors(), header["tensors"]):
        arr = take(spec["shape"])
        if list(arr.shape) != list(decl.shape):
            raise ValueError(f"{path}: tensor {spec['name']} shape mismatch")
        tensors.append(arr)
    model = skeleton.replace_tensors(tensors)
    extra = {spec["name"]: take(spec["shape"]) for spec in header["extra"]}
    if offset != len(body):
        raise ValueError(f"{path}: {len(body) - offset} trailing bytes in checkpoint")
    return model, extra, header.get("meta", {})
