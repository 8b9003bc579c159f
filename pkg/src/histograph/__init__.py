"""Nuclei-graph construction and spatial graph convolutional classification.

The pipeline turns an RGB tissue image into a graph whose vertices are
detected nuclei and whose edges connect nearby nuclei with distance-based
weights, then classifies whole graphs with a small graph convolutional
network implemented directly on numpy.
"""

from .detect import NucleusSet, detect_nuclei, load_nuclei_csv, save_nuclei_csv
from .gcn import (
    ModelParams,
    build_model,
    load_checkpoint,
    model_backward,
    model_forward,
    normalize_adjacency,
    save_checkpoint,
    softmax_cross_entropy,
)
from .graph import (
    AdjacencyTensor,
    EmbeddingProvider,
    Histograph,
    VertexFeatureMatrix,
    assemble_vertex_features,
    build_edges,
    deserialize,
    serialize,
)
from .imaging import Patch, RgbImage, extract_patch, load_image, quantize, to_grayscale
from .stain import StainMatrix, deconvolve, estimate_stain_matrix, od_transform
from .synth import SynthConfig, default_configs, generate_dataset, generate_graph
from .train import TrainConfig, evaluate, load_manifest, train

__all__ = [
    "AdjacencyTensor",
    "EmbeddingProvider",
    "Histograph",
    "ModelParams",
    "NucleusSet",
    "Patch",
    "RgbImage",
    "StainMatrix",
    "SynthConfig",
    "TrainConfig",
    "VertexFeatureMatrix",
    "assemble_vertex_features",
    "build_edges",
    "build_model",
    "deconvolve",
    "default_configs",
    "deserialize",
    "detect_nuclei",
    "estimate_stain_matrix",
    "evaluate",
    "extract_patch",
    "generate_dataset",
    "generate_graph",
    "load_checkpoint",
    "load_image",
    "load_manifest",
    "load_nuclei_csv",
    "model_backward",
    "model_forward",
    "normalize_adjacency",
    "od_transform",
    "quantize",
    "save_checkpoint",
    "save_nuclei_csv",
    "serialize",
    "softmax_cross_entropy",
    "to_grayscale",
    "train",
]
