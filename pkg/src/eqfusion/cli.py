"""Command-line entry point.

Subcommands: train, generate, eval, sweep, classify, dump-features,
make-synthetic. Every run resolves its configuration (file, then command-line
overrides), writes a manifest next to its outputs, and exits 0 on success,
2 on usage errors, and 3 on configuration errors.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig, parse_config, parse_config_text, serialize_config
from .data import load_dataset, make_synthetic_dataset, normalize_images, split_unseen, synthetic_spec
from .errors import ConfigError
from .evaluation import (
    augment_classification,
    dump_feature_maps,
    eval_generation,
    generate_from_pool,
    save_image_grid,
    shot_sweep,
)
from .trainer import load_checkpoint, train, write_manifest

OUTPUT_ROOT_ENV = "EQFUSION_OUT"

_OVERRIDE_FLAGS = {
    "k": ("--k", int),
    "iterations": ("--iterations", int),
    "batch_size": ("--batch-size", int),
    "lr": ("--lr", float),
    "seed": ("--seed", int),
    "image_size": ("--image-size", int),
    "lambda_rec_g": ("--lambda-rec", float),
    "lambda_cls_g": ("--lambda-cls", float),
    "lambda_con_g": ("--lambda-con", float),
    "lambda_cls_d": ("--lambda-cls-d", float),
    "channel_plan": ("--channel-plan", str),
    "data_root": ("--data-root", str),
    "checkpoint_interval": ("--checkpoint-interval", int),
    "log_interval": ("--log-interval", int),
    "unseen_split_fraction": ("--unseen-split-fraction", float),
}

_DISABLE_FLAGS = {
    "texture_skips": "--no-texture-skips",
    "structure_skips": "--no-structure-skips",
    "consistent_eq": "--no-consistent-eq",
}


def _add_config_args(parser):
    parser.add_argument("--config", help="flat key=value config file")
    for key, (flag, kind) in _OVERRIDE_FLAGS.items():
        parser.add_argument(flag, dest=f"cfg_{key}", type=kind, default=None)
    for key, flag in _DISABLE_FLAGS.items():
        parser.add_argument(flag, dest=f"cfg_{key}", action="store_const", const=False, default=None)
    parser.add_argument(
        "--set",
        dest="cfg_set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key",
    )


def _resolve_config(args) -> RunConfig:
    overrides = {}
    for entry in args.cfg_set:
        if "=" not in entry:
            raise ConfigError(f"--set expects KEY=VALUE, got {entry!r}")
        key, _, value = entry.partition("=")
        overrides[key.strip()] = value
    for key in list(_OVERRIDE_FLAGS) + list(_DISABLE_FLAGS):
        value = getattr(args, f"cfg_{key}", None)
        if value is not None:
            overrides[key] = value if not isinstance(value, (int, float, bool)) else value
    if args.config:
        return parse_config(args.config, overrides)
    return parse_config_text("", overrides)


def _out_dir(args, default_name):
    if args.out:
        path = Path(args.out)
    else:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        path = Path(root) / default_name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve_checkpoint(value, args):
    if value != "last":
        return Path(value)
    root = Path(args.out) if args.out else Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    candidates = sorted(root.rglob("*.pt"), key=lambda p: p.stat().st_mtime)
    if not candidates:
        raise FileNotFoundError(f"no checkpoints found under {root}")
    return candidates[-1]


def _load_run(checkpoint_path, args, config=None):
    checkpoint = load_checkpoint(checkpoint_path)
    config = config or checkpoint.config
    if getattr(args, "cfg_data_root", None):
        config.data_root = args.cfg_data_root
    dataset = load_dataset(config.dataset_spec(), config.seed)
    return checkpoint, config, dataset


# -- subcommand handlers -----------------------------------------------------

def _cmd_train(args):
    config = _resolve_config(args)
    out = _out_dir(args, "train")
    result = train(config, out, resume=args.resume)
    print(f"trained {result.iterations} iterations")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"losses: {result.losses_csv}")
    return 0


def _cmd_generate(args):
    ckpt_path = _resolve_checkpoint(args.checkpoint, args)
    checkpoint, config, dataset = _load_run(ckpt_path, args)
    out = _out_dir(args, "generate")
    names = {dataset.category(l).name: l for l in range(len(dataset.categories))}
    if args.category not in names:
        raise ConfigError(f"unknown category {args.category!r}")
    cat = dataset.category(names[args.category])
    rng = np.random.default_rng(args.gen_seed)
    from .trainer import generator_from_checkpoint

    generator = generator_from_checkpoint(checkpoint)
    images = generate_from_pool(generator, cat.images, args.count, config.k, rng)
    grid = save_image_grid(images, out / f"{cat.name}_generated.png")
    write_manifest(out, config, "generate", {"checkpoint": str(ckpt_path), "category": cat.name})
    print(f"wrote {args.count} generated images to {grid}")
    return 0


def _cmd_eval(args):
    ckpt_path = _resolve_checkpoint(args.checkpoint, args)
    checkpoint, config, dataset = _load_run(ckpt_path, args)
    out = _out_dir(args, "eval")
    split = split_unseen(dataset, config.unseen_split_fraction, config.seed)
    report = eval_generation(
        checkpoint,
        dataset,
        split,
        per_category=args.per_category,
        k=config.k,
        seed=config.seed,
        out_dir=out,
    )
    write_manifest(out, config, "eval", {"checkpoint": str(ckpt_path), **report.metadata})
    print(f"mean FID {report.fid_mean:.4f}  mean LPIPS {report.lpips_mean:.4f}")
    for row in report.per_category:
        print(f"  {row.category}: fid {row.fid:.4f}  lpips {row.lpips:.4f}")
    return 0


def _cmd_sweep(args):
    checkpoints = {}
    for entry in args.checkpoint:
        if "=" not in entry:
            raise ConfigError(f"--checkpoint expects K=PATH, got {entry!r}")
        k, _, path = entry.partition("=")
        checkpoints[int(k)] = path
    first = load_checkpoint(next(iter(checkpoints.values())))
    config = first.config
    if args.cfg_data_root:
        config.data_root = args.cfg_data_root
    dataset = load_dataset(config.dataset_spec(), config.seed)
    split = split_unseen(dataset, config.unseen_split_fraction, config.seed)
    out = _out_dir(args, "sweep")
    rows = shot_sweep(
        checkpoints,
        dataset,
        split,
        k_values=tuple(int(k) for k in args.k_values.split(",")),
        per_category=args.per_category,
        seed=config.seed,
        out_dir=out,
    )
    write_manifest(out, config, "sweep", {"checkpoints": {str(k): str(v) for k, v in checkpoints.items()}})
    for k, value in rows:
        print(f"K={k}: {'(no checkpoint)' if value is None else f'fid {value:.4f}'}")
    return 0


def _cmd_classify(args):
    ckpt_path = _resolve_checkpoint(args.checkpoint, args)
    checkpoint, config, dataset = _load_run(ckpt_path, args)
    out = _out_dir(args, "classify")
    counts = tuple(int(c) for c in args.splits.split(","))
    report = augment_classification(
        checkpoint,
        dataset,
        split_counts=counts,
        augment_per_category=args.augment_count,
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        epochs=args.epochs,
    )
    write_manifest(out, config, "classify", {"checkpoint": str(ckpt_path)})
    payload = {
        "base_accuracy": report.base_accuracy,
        "augmented_accuracy": report.augmented_accuracy,
        "base_mean": report.base_mean,
        "augmented_mean": report.augmented_mean,
    }
    (out / "classification.json").write_text(json.dumps(payload, indent=2))
    print(f"base top-1: {report.base_mean:.2f}%  augmented top-1: {report.augmented_mean:.2f}%")
    return 0


def _cmd_dump_features(args):
    ckpt_path = _resolve_checkpoint(args.checkpoint, args)
    checkpoint, config, dataset = _load_run(ckpt_path, args)
    out = _out_dir(args, "features")
    rng = np.random.default_rng(config.seed)
    label = dataset.labels(args.partition)[0]
    cat = dataset.category(label)
    idx = rng.choice(cat.images.shape[0], size=min(args.count, cat.images.shape[0]), replace=False)
    images = torch.from_numpy(normalize_images(cat.images[idx]))
    from .trainer import generator_from_checkpoint

    paths = dump_feature_maps(generator_from_checkpoint(checkpoint), images, out)
    write_manifest(out, config, "dump-features", {"checkpoint": str(ckpt_path), "category": cat.name})
    print(f"wrote {len(paths)} feature maps to {out}")
    return 0


def _cmd_make_synthetic(args):
    root = Path(args.out or "synthetic")
    make_synthetic_dataset(
        root,
        categories=args.categories,
        images_per_category=args.images_per_category,
        image_size=args.size,
        seed=args.seed,
    )
    spec = synthetic_spec(
        root,
        categories=args.categories,
        images_per_category=args.images_per_category,
        image_size=args.size,
        seen_count=args.seen,
    )
    config = parse_config_text(
        "",
        {
            "data_root": str(root),
            "total_categories": str(spec.total_categories),
            "seen_count": str(spec.seen_count),
            "unseen_count": str(spec.unseen_count),
            "images_per_category": str(spec.images_per_category),
            "image_size": str(spec.image_size),
        },
    )
    cfg_path = root / "synthetic.cfg"
    cfg_path.write_text(serialize_config(config))
    write_manifest(root, config, "make-synthetic")
    print(f"synthetic dataset at {root} ({spec.total_categories} categories)")
    print(f"config: {cfg_path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="eqfusion", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop")
    _add_config_args(p_train)
    p_train.add_argument("--out", help="output directory")
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.set_defaults(handler=_cmd_train)

    p_gen = sub.add_parser("generate", help="generate images for one category")
    _add_config_args(p_gen)
    p_gen.add_argument("--checkpoint", required=True, help="checkpoint path or 'last'")
    p_gen.add_argument("--category", required=True)
    p_gen.add_argument("--count", type=int, default=16)
    p_gen.add_argument("--gen-seed", type=int, default=0)
    p_gen.add_argument("--out")
    p_gen.set_defaults(handler=_cmd_generate)

    p_eval = sub.add_parser("eval", help="per-category FID/LPIPS on unseen categories")
    _add_config_args(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint path or 'last'")
    p_eval.add_argument("--per-category", type=int, default=128)
    p_eval.add_argument("--out")
    p_eval.set_defaults(handler=_cmd_eval)

    p_sweep = sub.add_parser("sweep", help="FID across shot counts")
    _add_config_args(p_sweep)
    p_sweep.add_argument(
        "--checkpoint", action="append", required=True, metavar="K=PATH",
        help="repeatable; one trained checkpoint per shot count",
    )
    p_sweep.add_argument("--k-values", default="2,3,5,7,9")
    p_sweep.add_argument("--per-category", type=int, default=128)
    p_sweep.add_argument("--out")
    p_sweep.set_defaults(handler=_cmd_sweep)

    p_cls = sub.add_parser("classify", help="augmentation benefit for classification")
    _add_config_args(p_cls)
    p_cls.add_argument("--checkpoint", required=True, help="checkpoint path or 'last'")
    p_cls.add_argument("--splits", default="10,15,15", help="train,val,test images per category")
    p_cls.add_argument("--augment-count", type=int, default=50)
    p_cls.add_argument("--seeds", default="0,1,2")
    p_cls.add_argument("--epochs", type=int, default=20)
    p_cls.add_argument("--out")
    p_cls.set_defaults(handler=_cmd_classify)

    p_dump = sub.add_parser("dump-features", help="save encoder feature heatmaps")
    _add_config_args(p_dump)
    p_dump.add_argument("--checkpoint", required=True, help="checkpoint path or 'last'")
    p_dump.add_argument("--partition", choices=("seen", "unseen"), default="seen")
    p_dump.add_argument("--count", type=int, default=4)
    p_dump.add_argument("--out")
    p_dump.set_defaults(handler=_cmd_dump_features)

    p_synth = sub.add_parser("make-synthetic", help="write a synthetic shape dataset")
    p_synth.add_argument("--out", help="dataset root directory")
    p_synth.add_argument("--categories", type=int, default=10)
    p_synth.add_argument("--images-per-category", type=int, default=20)
    p_synth.add_argument("--size", type=int, default=32)
    p_synth.add_argument("--seen", type=int, default=None)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(handler=_cmd_make_synthetic)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # structured nonzero exit for runtime failures
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
