"""AdamW, the triangular learning-rate schedule and global gradient-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class AdamWConfig:
    lr_peak: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decay_norm_and_bias: bool = True

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int
    lr_peak: float

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    @classmethod
    def from_epochs(cls, epochs: int, steps_per_epoch: int, lr_peak: float) -> "ScheduleConfig":
        return cls(epochs * steps_per_epoch, lr_peak)


def lr_at(t: float, sched: ScheduleConfig) -> float:
    """Linear ramp from 0 to the peak at T/2, then linear decay back to 0 at T."""
    T = sched.total_steps
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    return sched.lr_peak * (1.0 - abs(1.0 - 2.0 * t / T))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


GradLike = Union[Tensor, np.ndarray, None]


def _grad_array(g: GradLike) -> Optional[np.ndarray]:
    if isinstance(g, Tensor):
        return g.grad
    return g


def global_grad_norm(grads: Iterable[GradLike]) -> float:
    total = 0.0
    for g in grads:
        arr = _grad_array(g)
        if arr is not None:
            total += float(np.sum(np.square(arr, dtype=np.float64)))
    return math.sqrt(total)


def clip_grad_global_norm(grads: Sequence[GradLike], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``.

    Accepts gradient arrays or tensors (whose ``.grad`` is clipped). Returns the
    norm measured before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            arr = _grad_array(g)
            if arr is not None:
                arr *= np.asarray(scale, dtype=arr.dtype)
    return norm


def _decays(name: str, cfg: AdamWConfig) -> bool:
    if cfg.decay_norm_and_bias:
        return True
    return not (name.endswith("bias") or ".norm." in name)


def adamw_step(
    params: Mapping[str, Tensor],
    state: OptimizerState,
    cfg: AdamWConfig,
    lr: float,
) -> None:
    """One AdamW update of every tensor in ``params`` using its ``.grad``.

    A missing gradient counts as zero. Weight decay multiplies the pre-step
    parameter and never passes through the moment estimates.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        theta = p.data
        g = p.grad if p.grad is not None else np.zeros_like(theta)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        wd = cfg.weight_decay if _decays(name, cfg) else 0.0
        p.data = (theta * np.asarray(1.0 - lr * wd, dtype=theta.dtype) - lr * update).astype(theta.dtype)


class AdamW:
    """Stateful wrapper pairing a parameter dict with its moment buffers."""

    def __init__(self, params: Mapping[str, Tensor], cfg: AdamWConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.state = OptimizerState()

    def step(self, lr: float) -> None:
        adamw_step(self.params, self.state, self.cfg, lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
