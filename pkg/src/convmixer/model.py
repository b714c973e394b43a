"""ConvMixer: patch embedding, d depthwise/pointwise mixing blocks, pooling, linear head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from . import nn
from .nn import BatchNormState, ConvSpec
from .tensor import ShapeError, Tensor, get_default_dtype


@dataclass(frozen=True)
class ModelConfig:
    h: int
    d: int
    p: int
    k: int
    c_in: int = 3
    n_classes: int = 10
    activation: Literal["gelu", "relu"] = "gelu"
    norm: Literal["batchnorm", "layernorm"] = "batchnorm"
    residual_depthwise: bool = True
    residual_pointwise: bool = False

    def __post_init__(self):
        for name in ("h", "p", "k", "c_in", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d < 0:
            raise ValueError(f"d must be >= 0, got {self.d}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.norm not in ("batchnorm", "layernorm"):
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def name(self) -> str:
        return f"ConvMixer-{self.h}/{self.d}"


def param_count(config: ModelConfig) -> int:
    """Closed-form number of trainable scalars.

    Every convolution carries a bias and every norm layer a (gamma, beta)
    pair, which is where the per-block 6h and the trailing 3h come from.
    """
    h, d, k, p = config.h, config.d, config.k, config.p
    n = config.n_classes
    return h * (d * (k * k + h + 6) + config.c_in * p * p + n + 3) + n


class _Norm:
    """One post-activation norm layer: BatchNorm2d or channel LayerNorm."""

    def __init__(self, kind: str, channels: int):
        self.kind = kind
        self.state = BatchNormState.create(channels)

    @property
    def gamma(self) -> Tensor:
        return self.state.gamma

    @property
    def beta(self) -> Tensor:
        return self.state.beta

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        if self.kind == "batchnorm":
            return nn.batchnorm2d(x, self.state, mode)
        return nn.layernorm(x, self.state.gamma, self.state.beta, self.state.eps)


class _ConvActNorm:
    def __init__(self, spec: ConvSpec, act: str, norm: str):
        dt = get_default_dtype()
        self.spec = spec
        self.act = act
        self.weight = Tensor(np.zeros(spec.weight_shape, dtype=dt), requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels, dtype=dt), requires_grad=True)
        self.norm = _Norm(norm, spec.out_channels)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return self.norm(nn.activation(self.act, nn.conv2d(x, self.weight, self.bias, self.spec)), mode)


class ConvMixer:
    """A ConvMixer network with named parameters and a train/eval mode flag.

    Use :func:`build` to get a seeded instance.
    """

    def __init__(self, config: ModelConfig):
        c = config
        self.config = c
        self.mode = "train"
        self.patch_embed = _ConvActNorm(ConvSpec.patch_embed(c.c_in, c.h, c.p), c.activation, c.norm)
        self.blocks = [
            (_ConvActNorm(ConvSpec.depthwise(c.h, c.k), c.activation, c.norm),
             _ConvActNorm(ConvSpec.pointwise(c.h, c.h), c.activation, c.norm))
            for _ in range(c.d)
        ]
        dt = get_default_dtype()
        self.classifier_weight = Tensor(np.zeros((c.h, c.n_classes), dtype=dt), requires_grad=True)
        self.classifier_bias = Tensor(np.zeros(c.n_classes, dtype=dt), requires_grad=True)

    # -- naming ---------------------------------------------------------------

    def _stages(self):
        yield "patch_embed", self.patch_embed
        for i, (dw, pw) in enumerate(self.blocks):
            yield f"blocks.{i}.depthwise", dw
            yield f"blocks.{i}.pointwise", pw

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors in a fixed order, keyed by stable names."""
        out: dict[str, Tensor] = {}
        for prefix, stage in self._stages():
            out[f"{prefix}.weight"] = stage.weight
            out[f"{prefix}.bias"] = stage.bias
            out[f"{prefix}.norm.weight"] = stage.norm.gamma
            out[f"{prefix}.norm.bias"] = stage.norm.beta
        out["classifier.weight"] = self.classifier_weight
        out["classifier.bias"] = self.classifier_bias
        return out

    def norm_states(self) -> dict[str, BatchNormState]:
        if self.config.norm != "batchnorm":
            return {}
        return {f"{prefix}.norm": stage.norm.state for prefix, stage in self._stages()}

    def buffers(self) -> dict[str, np.ndarray]:
        """BatchNorm running statistics (empty for the LayerNorm variant)."""
        out: dict[str, np.ndarray] = {}
        for prefix, state in self.norm_states().items():
            out[f"{prefix}.running_mean"] = state.running_mean
            out[f"{prefix}.running_var"] = state.running_var
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        prefix, _, attr = name.rpartition(".")
        state = self.norm_states().get(prefix)
        if state is None or attr not in ("running_mean", "running_var"):
            raise KeyError(f"unknown buffer {name!r}")
        current = getattr(state, attr)
        if value.shape != current.shape:
            raise ShapeError(f"buffer {name}: shape {value.shape} != {current.shape}")
        setattr(state, attr, np.array(value, dtype=current.dtype))

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def train(self) -> "ConvMixer":
        self.mode = "train"
        return self

    def eval(self) -> "ConvMixer":
        self.mode = "eval"
        return self

    # -- forward --------------------------------------------------------------

    def forward(self, x: Tensor, return_features: bool = False):
        c = self.config
        if x.ndim != 4 or x.shape[1] != c.c_in:
            raise ShapeError(f"expected B x {c.c_in} x H x W input, got {x.shape}")
        if x.shape[2] < c.p or x.shape[3] < c.p:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} is smaller than one {c.p}x{c.p} patch")
        z = self.patch_embed(x, self.mode)
        features = [z]
        for dw, pw in self.blocks:
            y = dw(z, self.mode)
            if c.residual_depthwise:
                y = y + z
            out = pw(y, self.mode)
            if c.residual_pointwise:
                out = out + y
            z = out
            features.append(z)
        logits = nn.linear(nn.global_avg_pool(z), self.classifier_weight, self.classifier_bias)
        if return_features:
            return logits, features
        return logits

    __call__ = forward


def build(config: ModelConfig, seed: int = 0) -> ConvMixer:
    """Construct a ConvMixer with weights drawn deterministically from ``seed``.

    Conv and linear weights are uniform in +-1/sqrt(fan_in); biases start at
    zero, norm scales at one and norm shifts at zero.
    """
    model = ConvMixer(config)
    rng = np.random.default_rng(seed)
    dt = get_default_dtype()
    for name, t in model.parameters().items():
        if name.endswith(".norm.weight"):
            continue
        if name.endswith("bias"):
            continue
        if name == "classifier.weight":
            fan_in = t.shape[0]
        else:
            fan_in = int(np.prod(t.shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        t.data = rng.uniform(-bound, bound, size=t.shape).astype(dt)
    return model


def internal_resolution(config: ModelConfig, height: int, width: Optional[int] = None) -> tuple[int, int]:
    width = height if width is None else width
    return height // config.p, width // config.p
