"""``hypermap`` command line: synth, train, classify-scene, segment, embed, activations.

Exit codes: 0 success, 2 input error, 3 I/O error, 4 numeric failure.
Precedence of settings: command-line flags, then the ``--config`` JSON file
(top-level keys apply to every subcommand, a nested object named after the
subcommand applies to that one only), then built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import InputError, NumericError

log = logging.getLogger("hypermap")

EXIT_OK, EXIT_INPUT, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _ratios(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="global seed; module streams derive from it")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    p.add_argument("--config", default=None, help="JSON file of flag defaults")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hypermap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes, masks and a manifest")
    _common(p)
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--size", type=int, default=1728, help="scene width and height in pixels")
    p.add_argument("--patch-size", type=int, default=144)
    p.add_argument("--tile-stride", type=int, default=None, help="grid stride (default: patch size)")
    p.add_argument("--ratios", type=_ratios, default=(0.5, 0.25, 0.25), help="train,val,map scene fractions")
    p.add_argument("--density", type=float, default=0.5)
    p.add_argument("--region-size", type=int, default=144)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the settlement CNN from a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--arch", choices=["full", "reduced"], default="full")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.00273)
    p.add_argument("--batch-size", type=int, default=150)
    p.add_argument("--init-std", type=float, default=None)
    p.add_argument("--no-shuffle", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify-scene", help="block-level settlement map of a scene")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--block", type=int, default=16)
    p.set_defaults(func=cmd_classify_scene)

    p = sub.add_parser("segment", help="hypercolumn K-means pixel segmentation of a scene")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--layers", default="conv1..conv4")
    p.add_argument("--include-fcn", action="store_true")
    p.add_argument("--stride", type=int, default=4, help="pixel subsampling stride for fitting")
    p.add_argument("--kmeans-batch", type=int, default=1024)
    p.add_argument("--kmeans-iterations", type=int, default=200)
    p.add_argument("--normalize", action="store_true", help="standardize descriptor channels")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("embed", help="t-SNE plane of fcn features for one manifest split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="map", choices=["train", "val", "map"])
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--canvas", type=int, default=1024)
    p.add_argument("--thumb", type=int, default=None, help="thumbnail edge in pixels (default: patch size)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("activations", help="backprojected max-activation panels for patches")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patch", required=True, action="append", help="PGM file; repeat for several")
    p.add_argument("--layer", default="all", help="'all' or a comma list of conv layers")
    p.add_argument("--x", type=int, default=None, help="crop column when the image exceeds the input size")
    p.add_argument("--y", type=int, default=None, help="crop row when the image exceeds the input size")
    p.add_argument("--mode", choices=["sum", "max"], default="sum")
    p.set_defaults(func=cmd_activations)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InputError(f"config {args.config}: {e}") from None
    if not isinstance(cfg, dict):
        raise InputError(f"config {args.config} must hold a JSON object")
    defaults = {k.replace("-", "_"): v for k, v in cfg.items() if not isinstance(v, dict)}
    defaults.update({k.replace("-", "_"): v for k, v in cfg.get(args.command, {}).items()})
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in subparser._actions}
    unknown = set(defaults) - known
    if unknown:
        raise InputError(f"config {args.config}: unknown settings {sorted(unknown)}")
    if "ratios" in defaults and isinstance(defaults["ratios"], list):
        defaults["ratios"] = tuple(defaults["ratios"])
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _write_run_record(args: argparse.Namespace, out: Path) -> None:
    items = {k: v for k, v in vars(args).items() if k != "func"}
    lines = [f"{k}={json.dumps(v)}" for k, v in sorted(items.items())]
    (out / "run.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args, out: Path) -> None:
    from .data import SyntheticSceneConfig, build_manifest, generate_synthetic_scene, write_pgm
    from .seeding import derive_seed

    if args.scenes < 1:
        raise InputError("--scenes must be at least 1")
    stride = args.tile_stride or args.patch_size
    (out / "scenes").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    entries = []
    for k in range(args.scenes):
        scene_seed = int(derive_seed(args.seed, f"data-io/scene/{k}").generate_state(1)[0])
        cfg = SyntheticSceneConfig(
            width=args.size,
            height=args.size,
            settlement_density=args.density,
            region_size=args.region_size,
            seed=scene_seed,
        )
        if args.patch_size > args.size:
            raise InputError(f"patch size {args.patch_size} exceeds scene size {args.size}")
        scene, mask = generate_synthetic_scene(cfg)
        rel = f"scenes/scene_{k:02d}.pgm"
        write_pgm(scene, out / rel)
        write_pgm(mask.astype(np.uint8) * 255, out / f"masks/mask_{k:02d}.pgm")
        entries.append((rel, mask))
    manifest = build_manifest(entries, args.patch_size, stride, args.ratios, seed=args.seed)
    manifest.write(out / "manifest.tsv")
    log.info("wrote %d scenes and %d manifest records", len(entries), len(manifest.records))


def cmd_train(args, out: Path) -> None:
    from .checkpoint import save_checkpoint
    from .data import DatasetManifest, load_patch_set
    from .net import ARCHITECTURES, TrainConfig, build_network, train

    manifest = DatasetManifest.read(args.manifest)
    spec = ARCHITECTURES[args.arch](num_classes=manifest.num_classes, input_size=manifest.patch_size)
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        init_std=args.init_std,
        seed=args.seed,
        shuffle=not args.no_shuffle,
    )
    train_set = load_patch_set(manifest, "train")
    val_set = load_patch_set(manifest, "val")
    net = build_network(spec, cfg)
    report = train(net, train_set, val_set, cfg)
    save_checkpoint(net, out / "checkpoint.hmap")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")


def cmd_classify_scene(args, out: Path) -> None:
    from .checkpoint import load_checkpoint
    from .data import read_pgm
    from .mapping import classify_scene_blocks

    net = load_checkpoint(args.checkpoint)
    grid = classify_scene_blocks(net, read_pgm(args.scene), block=args.block)
    grid.write(out / "labels.pgm")
    grid.write_preview(out / "labels.png")
    log.info("label grid %dx%d", grid.rows, grid.cols)


def cmd_segment(args, out: Path) -> None:
    from .checkpoint import load_checkpoint
    from .data import read_pgm
    from .features import LayerSelector
    from .mapping import segment_pixels

    if args.k < 2:
        raise InputError(f"--k must be at least 2, got {args.k}")
    net = load_checkpoint(args.checkpoint)
    sel = LayerSelector.parse(args.layers, include_fcn=args.include_fcn)
    grid = segment_pixels(
        net,
        read_pgm(args.scene),
        sel,
        K=args.k,
        sample_stride=args.stride,
        seed=args.seed,
        batch_size=args.kmeans_batch,
        iterations=args.kmeans_iterations,
        normalize=args.normalize,
    )
    grid.write(out / "clusters.pgm")
    grid.write_preview(out / "clusters.png")


def cmd_embed(args, out: Path) -> None:
    from .checkpoint import load_checkpoint
    from .data import DatasetManifest, load_patch_set, write_pgm
    from .embedding import EmbeddingConfig, embed, image_scatter
    from .features import batch_fcn_features
    from .seeding import rng_for

    net = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.read(args.manifest)
    if manifest.patch_size != net.spec.input_size:
        raise InputError(f"manifest patch size {manifest.patch_size} != network input {net.spec.input_size}")
    patches = load_patch_set(manifest, args.split)
    n_avail = len(patches.labels)
    if n_avail == 0:
        raise InputError(f"manifest split {args.split!r} is empty")
    if args.n < n_avail:
        keep = np.sort(rng_for(args.seed, "cli/embed-subset").choice(n_avail, size=args.n, replace=False))
    else:
        keep = np.arange(n_avail)
    cfg = EmbeddingConfig(perplexity=args.perplexity, iterations=args.iterations, seed=args.seed)
    cfg.check_size(len(keep))
    features = batch_fcn_features(net, patches.patches[keep])
    emb = embed(features, cfg)
    emb.write_table(out / "embedding.csv", ids=keep.tolist(), labels=patches.labels[keep].tolist())
    montage = image_scatter(emb, patches.patches[keep], args.canvas, thumb=args.thumb)
    write_pgm(montage, out / "montage.pgm")


def _load_patch(path: str, size: int, x, y) -> np.ndarray:
    from .data import read_pgm

    band = read_pgm(path).band
    h, w = band.shape
    if h < size or w < size:
        raise InputError(f"{path} is {h}x{w}, smaller than the {size}x{size} network input")
    y = (h - size) // 2 if y is None else y
    x = (w - size) // 2 if x is None else x
    if not (0 <= y <= h - size and 0 <= x <= w - size):
        raise InputError(f"crop at ({y}, {x}) leaves the {h}x{w} image {path}")
    return band[y : y + size, x : x + size][None]


def cmd_activations(args, out: Path) -> None:
    from .checkpoint import load_checkpoint
    from .data import write_pgm
    from .viz import probe_patch, render_panel

    net = load_checkpoint(args.checkpoint)
    convs = net.spec.conv_names
    layers = convs if args.layer == "all" else [t.strip() for t in args.layer.split(",") if t.strip()]
    bad = [l for l in layers if l not in convs]
    if bad or not layers:
        raise InputError(f"invalid layer(s) {bad or args.layer!r}; choose from {convs} or 'all'")
    for i, path in enumerate(args.patch):
        patch = _load_patch(path, net.spec.input_size, args.x, args.y)
        panel = render_panel(patch, probe_patch(net, patch, layers, args.mode))
        write_pgm(panel, out / f"panel_{i:02d}_{Path(path).stem}.pgm")


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except InputError as e:
        print(f"hypermap: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as e:
        print(f"hypermap: error: {e}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_run_record(args, out)
        if args.threads is not None:
            if args.threads < 1:
                raise InputError("--threads must be at least 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                args.func(args, out)
        else:
            args.func(args, out)
    except NumericError as e:
        print(f"hypermap: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except InputError as e:
        print(f"hypermap: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as e:
        print(f"hypermap: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
