"""Command-line entry point.

Subcommands: gen, train, eval, predict, stats, sweep, gradcheck.  Every
command takes --seed / --config / --out where meaningful; flags override
config-file values.  Exit status is 0 on success, 1 for a failed gradient
check, 2 for contract violations (bad shapes, malformed files, bad flags).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .autodiff import GradError, ShapeError
from .checkpoint import CheckpointError
from .data import (
    ImagePair,
    IngestionError,
    SyntheticConfig,
    dataset_stats,
    emit_dataset,
    load_image,
    parse_manifest,
    save_grayscale,
    save_image,
    stats_table,
)
from .training import (
    RunConfig,
    TrainingError,
    evaluate,
    gradcheck,
    load_checkpoint,
    load_split,
    model_from_checkpoint,
    predict_pair,
    save_checkpoint,
    sweep_pairs,
    train,
)


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.from_text(Path(args.config).read_text(encoding="utf-8"))
    else:
        cfg = RunConfig()
    for key in ("data", "out"):
        value = getattr(args, key, None)
        if value:
            setattr(cfg, key, value)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    overrides = ("epochs", "lr", "batch_size", "loss", "metric", "m1", "m2",
                 "lambda1", "lambda2", "lambda3", "weight_mode", "w1", "w2",
                 "reduction", "threshold")
    for key in overrides:
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "no_spatial", False):
        cfg.spatial = False
    if getattr(args, "no_channel", False):
        cfg.channel = False
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="run seed (default from config)")
    p.add_argument("--config", default=None, help="key=value run configuration file")
    p.add_argument("--out", default=None, help="output path")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", default=None, help="dataset manifest")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--loss", choices=("wdmc", "contrastive"), default=None)
    p.add_argument("--metric", choices=("l2", "cosine"), default=None)
    p.add_argument("--m1", type=float, default=None)
    p.add_argument("--m2", type=float, default=None)
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--lambda2", type=float, default=None)
    p.add_argument("--lambda3", type=float, default=None)
    p.add_argument("--weight-mode", dest="weight_mode",
                   choices=("dataset", "manual"), default=None)
    p.add_argument("--w1", type=float, default=None)
    p.add_argument("--w2", type=float, default=None)
    p.add_argument("--reduction", choices=("mean", "sum"), default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--no-spatial", action="store_true", help="disable spatial attention")
    p.add_argument("--no-channel", action="store_true", help="disable channel attention")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dascd",
        description="Siamese dual-attention change detection on bitemporal image pairs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="emit a synthetic labelled dataset")
    _add_common(p)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=25)
    p.add_argument("--n-test", type=int, default=25)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--shapes", type=int, default=3)
    p.add_argument("--brightness", type=float, default=0.08)
    p.add_argument("--gain", type=float, default=0.08)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--pseudo-only", action="store_true",
                   help="no structural changes: labels identically zero")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common(p)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None, help="dataset manifest")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--threshold", type=float, default=None)

    p = sub.add_parser("predict", help="distance and change maps for one pair")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--t0", required=True)
    p.add_argument("--t1", required=True)
    p.add_argument("--threshold", type=float, default=None)

    p = sub.add_parser("stats", help="changed/unchanged pixel statistics of a manifest")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset manifest")

    p = sub.add_parser("sweep", help="metrics across a threshold grid")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None, help="dataset manifest")
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--t-min", type=float, default=0.0)
    p.add_argument("--t-max", type=float, default=2.5)
    p.add_argument("--steps", type=int, default=21)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--probes", type=int, default=50)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--tolerance", type=float, default=1e-3)
    return parser


def _cmd_gen(args) -> int:
    cfg = SyntheticConfig(image_size=args.size, n_shapes=args.shapes,
                          brightness=args.brightness, channel_gain=args.gain,
                          noise_sigma=args.noise, seed=args.seed or 0)
    out = args.out or "dataset"
    manifest = emit_dataset(cfg, out, args.n_train, args.n_val, args.n_test,
                            pseudo_only=args.pseudo_only)
    stats = dataset_stats(parse_manifest(manifest))
    print(f"manifest written to {manifest}")
    print(stats_table(stats))
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    if not cfg.data:
        raise TrainingError("train needs --data or a config with data set")
    ckpt = train(cfg)
    out = cfg.out or "model.dascd"
    save_checkpoint(ckpt, out)
    first, last = ckpt.loss_history[0], ckpt.loss_history[-1]
    print(f"checkpoint written to {out}")
    print(f"epochs={ckpt.epoch} first_epoch_loss={first:.6f} last_epoch_loss={last:.6f}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    manifest = parse_manifest(args.data or ckpt.cfg.data)
    report, _ = evaluate(ckpt, manifest, args.split, args.threshold)
    print(report.machine_line())
    print(report.table())
    return 0


def _cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    pair = ImagePair(load_image(args.t0), load_image(args.t1))
    d, mask = predict_pair(model, pair, args.threshold)
    prefix = args.out or "prediction"
    scale = float(d.max()) if d.max() > 0 else 1.0
    save_grayscale(f"{prefix}_distance.png", np.round(d / scale * 255.0))
    save_image(f"{prefix}_change.png", mask)
    Path(f"{prefix}_distance_scale.txt").write_text(
        f"scale={scale!r}\n# gray 255 corresponds to distance {scale!r}\n",
        encoding="utf-8")
    print(f"wrote {prefix}_distance.png, {prefix}_change.png "
          f"(changed fraction {mask.mean():.4f})")
    return 0


def _cmd_stats(args) -> int:
    stats = dataset_stats(parse_manifest(args.data))
    print(stats_table(stats))
    return 0


def _cmd_sweep(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    manifest = parse_manifest(args.data or ckpt.cfg.data)
    pairs = load_split(manifest, args.split)
    grid = np.linspace(args.t_min, args.t_max, args.steps)
    rows, best = sweep_pairs(model, pairs, grid)
    for t, report in rows:
        print(f"t={t:.4f} {report.machine_line()}")
    print(f"best_f1_threshold={best:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    report = gradcheck(cfg, n_probes=args.probes, seed=cfg.seed,
                       tolerance=args.tolerance, image_size=args.size)
    worst = max(report.probes, key=lambda p: p.error)
    print(f"probes={len(report.probes)} max_rel_error={report.max_error:.3e} "
          f"worst={worst.name}[{worst.index}]")
    print("gradcheck PASS" if report.passed else "gradcheck FAIL")
    return 0 if report.passed else 1


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "stats": _cmd_stats,
    "sweep": _cmd_sweep,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ShapeError, GradError, IngestionError, CheckpointError, TrainingError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
