"""Command-line entry points: train, eval, params, bench, viz."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import config as config_mod
from .bench import bench_grid, format_table
from .checkpoint import Checkpoint
from .data import load_cifar10_dir, synthetic_dataset
from .model import ModelConfig, param_count
from .train import eval_checkpoint, train
from .viz import render, write_ppm


def _thread_limit():
    cap = os.environ.get("CMIX_THREADS")
    if not cap:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(cap))


def _load_config(path: str, overrides: Sequence[str]) -> config_mod.RunConfig:
    values = config_mod.parse_text(Path(path).read_text())
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        values[key.strip()] = value.strip()
    return config_mod.from_mapping(values)


def _eval_dataset(spec: str, split: str, ckpt: Checkpoint):
    """``synthetic:N[:SEED]`` or a CIFAR-10 binary directory."""
    if spec.startswith("synthetic"):
        parts = spec.split(":")
        n = int(parts[1]) if len(parts) > 1 else ckpt.config.synthetic_n
        seed = int(parts[2]) if len(parts) > 2 else ckpt.config.seed
        return synthetic_dataset(n, ckpt.config.model.n_classes, seed=seed)
    return load_cifar10_dir(spec, split)


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.set)
    resume = Checkpoint.load(args.resume) if args.resume else None

    def show(rec):
        test = "-" if rec.test_acc is None else f"{rec.test_acc:.4f}"
        print(f"epoch {rec.epoch:>3} step {rec.step:>6} loss {rec.train_loss:.4f} "
              f"train_acc {rec.train_acc:.4f} test_acc {test} lr {rec.lr:.5f} "
              f"{rec.images_per_sec:.1f} img/s", flush=True)

    ckpt, _ = train(cfg, resume=resume, on_epoch=show)
    if cfg.out_dir:
        print(f"checkpoint written to {Path(cfg.out_dir) / 'final.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    ds = _eval_dataset(args.data, args.split, ckpt)
    acc, loss = eval_checkpoint(ckpt, ds)
    print(f"accuracy {acc:.4f} loss {loss:.4f} ({len(ds)} images)")
    return 0


def cmd_params(args) -> int:
    cfg = ModelConfig(h=args.h, d=args.d, p=args.p, k=args.k, c_in=args.c_in, n_classes=args.n_classes)
    print(param_count(cfg))
    return 0


def _parse_grid(items: Sequence[str]) -> dict[str, list[int]]:
    grid: dict[str, list[int]] = {}
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or key not in ("h", "d", "p", "k"):
            raise SystemExit(f"grid entries look like k=3,9 (keys h, d, p, k); got {item!r}")
        grid[key] = [int(v) for v in values.split(",") if v]
    return grid


def cmd_bench(args) -> int:
    if args.config:
        model = _load_config(args.config, args.set).model
    else:
        model = ModelConfig(h=256, d=8, p=7, k=9, n_classes=1000)
    rows = bench_grid(model, _parse_grid(args.grid or []), input_size=args.input_size,
                      batch_size=args.batch_size, batches=args.batches)
    print(format_table(rows))
    return 0


def cmd_viz(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    try:
        grid = render(ckpt, args.target, seed=args.seed, scale=args.scale)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 2
    write_ppm(args.out, grid.image)
    print(f"{grid.n_tiles} tiles of {grid.tile_size}x{grid.tile_size} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convmixer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a key=value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="CIFAR-10 binary directory or synthetic:N[:SEED]")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="exact parameter count")
    for name in ("h", "d", "p", "k", "c_in", "n_classes"):
        p.add_argument(name, type=int)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("bench", help="forward-pass throughput")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--grid", nargs="*", metavar="KEY=V1,V2")
    p.add_argument("--input-size", type=int, default=224)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--batches", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("viz", help="render patch-embedding or depthwise filters")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--target", default="patch_embed", help="patch_embed or blocks.<i>.depthwise")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=int, default=1)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    with _thread_limit():
        return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
