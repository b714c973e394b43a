"""Forward-pass throughput measurement."""

from __future__ import annotations

import dataclasses
import itertools
import time
from typing import Mapping, Sequence

import numpy as np

from .model import ModelConfig, build
from .tensor import Tensor, no_grad


def throughput(config: ModelConfig, input_size: int = 224, batch_size: int = 8, batches: int = 3,
               warmup: int = 1, seed: int = 0) -> float:
    """Mean eval-mode images/sec over ``batches`` timed forward passes after ``warmup`` untimed ones."""
    model = build(config, seed=seed).eval()
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((batch_size, config.c_in, input_size, input_size)).astype(np.float32))
    times = []
    with no_grad():
        for i in range(warmup + batches):
            t0 = time.perf_counter()
            model(x)
            if i >= warmup:
                times.append(time.perf_counter() - t0)
    return batch_size / float(np.mean(times))


def expand_grid(base: ModelConfig, grid: Mapping[str, Sequence]) -> list[ModelConfig]:
    keys = list(grid)
    return [dataclasses.replace(base, **dict(zip(keys, combo)))
            for combo in itertools.product(*(grid[k] for k in keys))]


def bench_grid(base: ModelConfig, grid: Mapping[str, Sequence], **kwargs) -> list[dict]:
    rows = []
    for cfg in expand_grid(base, grid) if grid else [base]:
        rows.append({"name": cfg.name, "p": cfg.p, "k": cfg.k, "images_per_sec": throughput(cfg, **kwargs)})
    return rows


def format_table(rows: Sequence[dict]) -> str:
    lines = [f"{'model':<18}{'p':>4}{'k':>4}{'img/s':>12}"]
    for r in rows:
        lines.append(f"{r['name']:<18}{r['p']:>4}{r['k']:>4}{r['images_per_sec']:>12.2f}")
    return "\n".join(lines)
