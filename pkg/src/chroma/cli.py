"""Command-line entry point: ``chroma prepare|train|colorize|evaluate|gradcheck``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Diagnostics go to stderr, summaries to stdout.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

from .checkpoint import CheckpointError
from .dataset import DatasetError, corpus_files, load_examples, load_rgb, prepare, save_rgb, scan
from .training import ConfigError, DivergenceError, TrainConfig

logger = logging.getLogger("chroma")


class UsageError(Exception):
    pass


# flag name -> (TrainConfig field, parser)
TRAIN_KEYS = {
    "mode": ("mode", str),
    "size": ("image_size", int),
    "epochs": ("epochs", int),
    "lr": ("learning_rate", float),
    "momentum": ("momentum", float),
    "batch": ("batch_size", int),
    "w_adv": ("w_adv", float),
    "seed": ("seed", int),
    "width": ("base_width", int),
    "batchnorm": ("batchnorm", lambda v: str(v).lower() in ("1", "true", "yes", "on")),
    "global_features": ("global_features", int),
}


def read_config_file(path) -> Dict[str, str]:
    """Flat ``key = value`` file; ``#`` comments; dashes and underscores are interchangeable."""
    values: Dict[str, str] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def build_train_config(args: argparse.Namespace) -> TrainConfig:
    file_values = read_config_file(args.config) if args.config else {}
    unknown = set(file_values) - set(TRAIN_KEYS) - {f for f, _ in TRAIN_KEYS.values()}
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for flag, (field, conv) in TRAIN_KEYS.items():
        value = getattr(args, flag, None)
        if value is None:
            value = file_values.get(flag, file_values.get(field))
        if value is None:
            continue
        try:
            kwargs[field] = conv(value)
        except ValueError as exc:
            raise ConfigError(field, f"cannot parse {value!r}") from exc
    return TrainConfig(**kwargs).validate()


# --------------------------------------------------------------------------
# subcommands


def cmd_prepare(args) -> int:
    if not Path(args.input).is_dir():
        raise UsageError(f"input directory not found: {args.input}")
    if args.manifest and not Path(args.manifest).is_file():
        raise UsageError(f"manifest not found: {args.manifest}")
    manifest = scan(args.input, args.manifest, args.size, args.split_seed, args.train_fraction)
    report = prepare(manifest, args.out, use_split=not args.no_split)
    for err in report.errors:
        print(f"error: {err}", file=sys.stderr)
    print(report.summary())
    return 1 if report.failed else 0


def cmd_train(args) -> int:
    from . import training
    from .plotting import plot_loss_curves

    if not Path(args.data).is_dir():
        raise UsageError(f"data directory not found: {args.data}")
    model = None
    if args.resume:
        model = training.ColorizationModel.load(args.resume)
        config = model.config
        if args.epochs is not None:
            config.epochs = args.epochs
        config.validate()
    else:
        config = build_train_config(args)
    examples = load_examples(corpus_files(args.data, "train"), config.image_size)
    out = Path(args.out)
    paths = training.train(config, examples, out, model=model, checkpoint_every=args.checkpoint_every)
    rows = training.read_metrics(out / "metrics.csv")
    plot_loss_curves(rows, out / "loss_curves.png")
    last = rows[-1] if rows else None
    print(f"checkpoints={len(paths)} steps={last[0] if last else 0} metrics={out / 'metrics.csv'}")
    return 0


def cmd_colorize(args) -> int:
    from .inference import colorize
    from .training import ColorizationModel

    if args.variants < 1:
        raise UsageError("--variants must be >= 1")
    model = ColorizationModel.load(args.ckpt)
    image = load_rgb(args.input)
    out = Path(args.out)
    targets: List[Path]
    if args.variants == 1:
        targets = [out]
    else:
        targets = [out.with_name(f"{out.stem}_v{i}{out.suffix or '.png'}") for i in range(args.variants)]
    for i, target in enumerate(targets):
        result = colorize(model, image, z_seed=args.z_seed, variant=i, size=args.size)
        save_rgb(result.output, target)
        print(target)
    return 0


def cmd_evaluate(args) -> int:
    from .inference import emit_grid, evaluate, write_report
    from .plotting import plot_eval_report
    from .training import ColorizationModel

    if not Path(args.ckpt).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.ckpt}")
    model = ColorizationModel.load(args.ckpt)
    files = corpus_files(args.data, "test")
    report = evaluate(model, files, model.config.image_size, z_seed=args.z_seed)
    path = write_report(report, args.report)
    plot_eval_report([r.path for r in report.rows], [r.ab_mse for r in report.rows],
                     [r.psnr_db for r in report.rows], path.with_suffix(".png"))
    if args.grid:
        emit_grid(report.grid_items, args.grid)
    print(report.summary())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_gan_gradients
    from .network import ShapeError, check_image_size

    try:
        check_image_size(args.size)
    except ShapeError as exc:
        raise UsageError(str(exc)) from exc
    if args.width < 1:
        raise UsageError("--width must be >= 1")
    res = check_gan_gradients(size=args.size, width=args.width, seed=args.seed,
                              samples_per_param=args.samples, grad_scale=args.corrupt_grad)
    print(f"max_rel_err={res.max_rel_err:.3e}")
    print(f"checked={res.generator.checked + res.discriminator.checked} "
          f"skipped_kinks={res.generator.kinks + res.discriminator.kinks}")
    if res.max_rel_err < args.tol:
        return 0
    w = res.worst
    print(f"gradient check failed at {w.worst_param}{list(w.worst_index)}: "
          f"analytic={w.worst_analytic:.10g} numeric={w.worst_numeric:.10g}", file=sys.stderr)
    return 1


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chroma", description="Dual-GAN CIELAB colorization toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="crop and resize a folder of images into a training corpus")
    p.add_argument("--input", required=True, help="directory of source images")
    p.add_argument("--manifest", help="crop manifest: 'path x y w h' per line")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--size", type=int, default=64, help="square output size (multiple of 16)")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--no-split", action="store_true", help="write all images to --out without train/test folders")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the A and B channel GANs")
    p.add_argument("--data", required=True, help="prepared corpus (uses DATA/train when present)")
    p.add_argument("--out", required=True, help="directory for checkpoints and metrics.csv")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--mode", choices=["makeup", "general"])
    p.add_argument("--size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--w-adv", dest="w_adv", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--width", type=int, help="base channel width of both networks")
    p.add_argument("--batchnorm", action="store_const", const="true", default=None)
    p.add_argument("--global-features", dest="global_features", type=int)
    p.add_argument("--checkpoint-every", type=int, default=1, help="epochs between checkpoints (0: final only)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("colorize", help="colorize one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--z-seed", type=int, default=0)
    p.add_argument("--variants", type=int, default=1, help="number of noise draws to emit")
    p.add_argument("--size", type=int, help="expected model resolution (checked against the checkpoint)")
    p.set_defaults(func=cmd_colorize)

    p = sub.add_parser("evaluate", help="score a checkpoint on a test corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="test images (uses DATA/test when present)")
    p.add_argument("--report", required=True, help="metrics CSV path")
    p.add_argument("--grid", help="comparison grid PNG path")
    p.add_argument("--z-seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the GAN gradients")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--width", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=8, help="coordinates checked per parameter tensor")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt-grad", type=float, default=1.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    value = os.environ.get("CHROMA_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"CHROMA_THREADS must be an integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"chroma {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, DatasetError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
