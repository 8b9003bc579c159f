"""Command-line pipeline: detect -> build -> synth -> train -> eval.

Every flag has a default documented in --help; outputs embed the effective
parameter values so runs can be reproduced from the artifacts alone.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import detect as detect_mod
from . import gcn, stain, synth
from .graph import (
    DEFAULT_EDGE_RADIUS,
    DEFAULT_WINDOW,
    EmbeddingProvider,
    Histograph,
    assemble_vertex_features,
    build_edges,
    load_embeddings_csv,
    serialize,
)
from .imaging import load_image
from .train import FeatureStats, TrainConfig, evaluate, load_manifest
from .train import train as run_training

CONFIG_KEYS = {
    "lr": float,
    "beta1": float,
    "beta2": float,
    "epsilon": float,
    "batch_size": int,
    "max_epochs": int,
    "patience": int,
    "pool_k": int,
    "conv_widths": "int_list",
    "dense_widths": "int_list",
}


def parse_config_file(path) -> TrainConfig:
    """Read a flat `key = value` config file into a TrainConfig.

    Lines starting with '#' and blank lines are ignored; unknown keys are
    rejected. List-valued keys (conv_widths, dense_widths) take
    comma-separated integers.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}: line {lineno}: unknown config key {key!r}")
        kind = CONFIG_KEYS[key]
        try:
            if kind == "int_list":
                values[key] = tuple(int(v) for v in value.split(","))
            else:
                values[key] = kind(value)
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: bad value for {key}: {value!r}") from None
    return TrainConfig(**values)


def _parse_pair(text: str, sep: str, name: str) -> tuple[int, int]:
    parts = text.split(sep)
    if len(parts) != 2:
        raise ValueError(f"{name} must look like '<a>{sep}<b>', got {text!r}")
    return int(parts[0]), int(parts[1])


def _parse_rgb(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"background must be 'r,g,b', got {text!r}")
    return tuple(int(p) for p in parts)


def _cmd_detect(args) -> int:
    img = load_image(args.image)
    od = stain.od_transform(img, background=_parse_rgb(args.background))
    if args.estimate_stains:
        matrix = stain.estimate_stain_matrix(od)
    else:
        matrix = stain.StainMatrix.reference()
    hema, _ = stain.deconvolve(od, matrix)
    if args.hema_out:
        stain.concentration_to_png(hema, args.hema_out)
    nuclei = detect_mod.detect_nuclei(hema, sigma=args.sigma,
                                      peak_threshold=args.peak_threshold,
                                      min_distance=args.min_distance)
    detect_mod.save_nuclei_csv(nuclei, args.out)
    print(f"detected {len(nuclei)} nuclei -> {args.out}")
    return 0


def _cmd_build(args) -> int:
    img = load_image(args.image)
    nuclei = detect_mod.load_nuclei_csv(args.nuclei, (img.width, img.height))
    adjacency = build_edges(nuclei, radius=args.radius)
    if args.embeddings:
        emb = load_embeddings_csv(args.embeddings, len(nuclei))
    else:
        emb = EmbeddingProvider.zero(len(nuclei))
    features = assemble_vertex_features(img, nuclei, adjacency, emb, window=args.window)
    provenance = {
        "image": args.image,
        "nuclei": args.nuclei,
        "embeddings": args.embeddings,
        "radius": args.radius,
        "window": args.window,
    }
    g = Histograph(nuclei, adjacency, features, label=args.label, provenance=provenance)
    serialize(g, args.out)
    print(f"built graph with {g.n} vertices (f={features.f}) -> {args.out}")
    return 0


def _cmd_synth(args) -> int:
    base = dict(
        canvas=_parse_pair(args.canvas, "x", "canvas"),
        n_points=_parse_pair(args.points, ":", "points"),
        n_clusters=_parse_pair(args.clusters, ":", "clusters"),
        cluster_radius=tuple(float(v) for v in
                             _parse_pair(args.cluster_radius, ":", "cluster-radius")),
        ring_fraction=args.ring_fraction,
        min_separation=args.min_separation,
        edge_radius=args.edge_radius,
    )
    configs = (synth.SynthConfig(kind="clustered", **base),
               synth.SynthConfig(kind="dispersed", **base))
    paths = synth.generate_dataset(configs, args.per_class, args.seed, args.out,
                                   train_fraction=args.train_fraction)
    print(f"wrote {2 * args.per_class} graphs under {paths['graphs']}")
    print(f"manifests: {paths['manifest']}, {paths['train']}, {paths['test']}")
    return 0


def _cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    config = parse_config_file(args.config) if args.config else TrainConfig()
    if args.epochs is not None:
        config = replace(config, max_epochs=args.epochs)
    if args.lr is not None:
        config = replace(config, lr=args.lr)

    log_lines = ["epoch,loss,accuracy"]

    def progress(record):
        line = f"{record.epoch},{record.loss!r},{record.accuracy!r}"
        log_lines.append(line)
        if not args.quiet:
            print(f"epoch {record.epoch}: loss {record.loss:.6f} "
                  f"acc {record.accuracy:.4f}")

    result = run_training(manifest, config, seed=args.seed, progress=progress)
    meta = {
        "manifest": args.manifest,
        "seed": args.seed,
        "config": {
            "lr": config.lr, "beta1": config.beta1, "beta2": config.beta2,
            "epsilon": config.epsilon, "batch_size": config.batch_size,
            "max_epochs": config.max_epochs, "patience": config.patience,
            "conv_widths": list(config.conv_widths), "pool_k": config.pool_k,
            "dense_widths": list(config.dense_widths),
        },
    }
    gcn.save_checkpoint(args.out, result.model,
                        extra={"feature_mean": result.stats.mean,
                               "feature_std": result.stats.std},
                        meta=meta)
    if args.log:
        Path(args.log).write_text("\n".join(log_lines) + "\n")
    final = result.log[-1]
    print(f"finished after {final.epoch} epochs: loss {final.loss:.6f} "
          f"train acc {final.accuracy:.4f} -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    model, extra, meta = gcn.load_checkpoint(args.checkpoint)
    if "feature_mean" not in extra or "feature_std" not in extra:
        raise ValueError(f"{args.checkpoint}: checkpoint lacks feature statistics")
    stats = FeatureStats(extra["feature_mean"], extra["feature_std"])
    report = evaluate(manifest, model, stats)
    print(report.to_text())
    if args.json:
        doc = report.to_dict()
        doc["provenance"] = {"manifest": args.manifest, "checkpoint": args.checkpoint,
                             "model_meta": meta}
        with open(args.json, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histograph",
        description="Turn tissue images into nuclei graphs and classify them "
                    "with a spatial graph convolutional network.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="detect nuclei in an image, write a nuclei CSV")
    p.add_argument("--image", required=True, help="input PNG/TIFF image")
    p.add_argument("--out", required=True, help="output nuclei CSV (header x,y)")
    p.add_argument("--sigma", type=float, default=3.0,
                   help="Gaussian smoothing std in pixels (default 3)")
    p.add_argument("--peak-threshold", type=float, default=0.2,
                   help="peak cutoff as a fraction of the global max (default 0.2)")
    p.add_argument("--min-distance", type=int, default=10,
                   help="minimum distance between detections in pixels (default 10)")
    p.add_argument("--background", default="255,255,255",
                   help="background intensity r,g,b (default 255,255,255)")
    p.add_argument("--estimate-stains", action="store_true",
                   help="estimate the stain matrix from the image instead of "
                        "using the built-in H&E reference")
    p.add_argument("--hema-out", default=None,
                   help="optionally write the hematoxylin map as a grayscale PNG")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("build", help="build a graph file from an image and nuclei CSV")
    p.add_argument("--image", required=True, help="input PNG/TIFF image")
    p.add_argument("--nuclei", required=True, help="nuclei CSV (header x,y)")
    p.add_argument("--out", required=True, help="output graph JSON path")
    p.add_argument("--radius", type=float, default=DEFAULT_EDGE_RADIUS,
                   help="edge distance threshold in pixels (default 100)")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW,
                   help="odd patch side for vertex features (default 71)")
    p.add_argument("--label", type=int, default=None, help="optional class id")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--embeddings", default=None,
                       help="per-nucleus embedding CSV (header e0,e1,...)")
    group.add_argument("--no-embeddings", action="store_true",
                       help="build without external embeddings (the default)")
    p.set_defaults(func=_cmd_build)

    p = sub.add_parser("synth", help="generate a labeled synthetic graph dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--per-class", type=int, default=100,
                   help="graphs per class (default 100)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--canvas", default="1024x1024", help="canvas WxH (default 1024x1024)")
    p.add_argument("--points", default="150:400",
                   help="point count range lo:hi (default 150:400)")
    p.add_argument("--clusters", default="3:8",
                   help="cluster count range lo:hi (default 3:8)")
    p.add_argument("--cluster-radius", default="60:140",
                   help="cluster radius range lo:hi in pixels (default 60:140)")
    p.add_argument("--ring-fraction", type=float, default=0.3,
                   help="fraction of cluster points on the boundary ring (default 0.3)")
    p.add_argument("--min-separation", type=float, default=6.0,
                   help="minimum spacing for dispersed points (default 6)")
    p.add_argument("--edge-radius", type=float, default=DEFAULT_EDGE_RADIUS,
                   help="edge distance threshold in pixels (default 100)")
    p.add_argument("--train-fraction", type=float, default=0.75,
                   help="per-class train split fraction (default 0.75)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a classifier from a manifest")
    p.add_argument("--manifest", required=True, help="manifest CSV (header path,label)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=0, help="training seed (default 0)")
    p.add_argument("--epochs", type=int, default=None,
                   help="override max_epochs from the config")
    p.add_argument("--lr", type=float, default=None, help="override lr from the config")
    p.add_argument("--log", default=None, help="write per-epoch records to this CSV")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch output")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--manifest", required=True, help="manifest CSV (header path,label)")
    p.add_argument("--checkpoint", required=True, help="checkpoint from `train`")
    p.add_argument("--json", default=None, help="also write the report as JSON")
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as err:
        print(f"error: {args.command}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
