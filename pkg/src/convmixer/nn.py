"""Layer primitives ConvMixer is assembled from.

Every function here takes and returns :class:`~convmixer.tensor.Tensor` and
supplies its own closed-form backward, so a whole layer is a single graph node.
Image tensors are laid out (batch, channel, height, width).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .tensor import ShapeError, Tensor, _make, get_default_dtype

Padding = Literal["same", "none"]


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    groups: int = 1
    padding: Padding = "none"

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_size, self.stride, self.groups) < 1:
            raise ValueError(f"conv extents must be >= 1: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups={self.groups}"
            )
        if self.padding not in ("same", "none"):
            raise ValueError(f"padding must be 'same' or 'none', got {self.padding!r}")

    @classmethod
    def depthwise(cls, channels: int, kernel_size: int) -> "ConvSpec":
        return cls(channels, channels, kernel_size, 1, channels, "same")

    @classmethod
    def patch_embed(cls, in_channels: int, hidden: int, patch_size: int) -> "ConvSpec":
        return cls(in_channels, hidden, patch_size, patch_size, 1, "none")

    @classmethod
    def pointwise(cls, in_channels: int, out_channels: int) -> "ConvSpec":
        return cls(in_channels, out_channels, 1, 1, 1, "none")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_size
        return (self.out_channels, self.in_channels // self.groups, k, k)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k, s = self.kernel_size, self.stride
        if self.padding == "same":
            return -(-h // s), -(-w // s)
        if h < k or w < k:
            raise ShapeError(f"input {h}x{w} is smaller than kernel {k} with padding='none'")
        return (h - k) // s + 1, (w - k) // s + 1

    def pads(self, h: int, w: int) -> tuple[int, int, int, int]:
        """(top, bottom, left, right) zero padding; odd totals put the extra row/col at the end."""
        if self.padding == "none":
            return 0, 0, 0, 0
        oh, ow = self.output_size(h, w)
        k, s = self.kernel_size, self.stride
        ph = max((oh - 1) * s + k - h, 0)
        pw = max((ow - 1) * s + k - w, 0)
        return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2


def _tap(xp: np.ndarray, i: int, j: int, s: int, oh: int, ow: int) -> np.ndarray:
    return xp[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    spec: ConvSpec,
    method: Literal["direct", "im2col"] = "direct",
) -> Tensor:
    """2-D cross-correlation with groups, stride and zero padding.

    ``method="direct"`` accumulates one shifted slice per kernel tap;
    ``"im2col"`` materializes all patches and contracts them in one einsum.
    Both give the same result and gradients.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects B x C x H x W input, got {x.shape}")
    B, C, H, W = x.shape
    if C != spec.in_channels:
        raise ShapeError(f"input has {C} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} != {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    oh, ow = spec.output_size(H, W)
    top, bottom, left, right = spec.pads(H, W)
    xp = x.data
    if top or bottom or left or right:
        xp = np.pad(xp, ((0, 0), (0, 0), (top, bottom), (left, right)))
    wd = weight.data
    if method == "direct":
        out, backward_core = _conv_direct(xp, wd, spec, oh, ow)
    elif method == "im2col":
        out, backward_core = _conv_im2col(xp, wd, spec, oh, ow)
    else:
        raise ValueError(f"unknown conv method {method!r}")
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gxp, gw = backward_core(g)
        gx = gxp[:, :, top:top + H, left:left + W]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv2d")


def _conv_direct(xp, wd, spec: ConvSpec, oh, ow):
    B, C = xp.shape[:2]
    O, G, k, s = spec.out_channels, spec.groups, spec.kernel_size, spec.stride
    Cg, Og, P = C // G, O // G, oh * ow
    dtype = xp.dtype
    out = np.zeros((B, O, oh, ow), dtype=dtype)
    depthwise = Cg == 1 and Og == 1
    if depthwise:
        tmp = np.empty_like(out)
        for i in range(k):
            for j in range(k):
                np.multiply(_tap(xp, i, j, s, oh, ow), wd[None, :, 0, i, j, None, None], out=tmp)
                out += tmp
    else:
        out4 = out.reshape(B, G, Og, P)
        for i in range(k):
            for j in range(k):
                xs = _tap(xp, i, j, s, oh, ow).reshape(B, G, Cg, P)
                out4 += np.matmul(wd[:, :, i, j].reshape(G, Og, Cg), xs)

    def backward_core(g):
        g = g.astype(dtype, copy=False)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        if depthwise:
            for i in range(k):
                for j in range(k):
                    xs = _tap(xp, i, j, s, oh, ow)
                    gw[:, 0, i, j] = np.einsum("bcyx,bcyx->c", g, xs)
                    _tap(gxp, i, j, s, oh, ow)[...] += g * wd[None, :, 0, i, j, None, None]
        else:
            g4 = g.reshape(B, G, Og, P)
            for i in range(k):
                for j in range(k):
                    xs = _tap(xp, i, j, s, oh, ow).reshape(B, G, Cg, P)
                    gw[:, :, i, j] = np.matmul(g4, xs.transpose(0, 1, 3, 2)).sum(axis=0).reshape(O, Cg)
                    wt = wd[:, :, i, j].reshape(G, Og, Cg).transpose(0, 2, 1)
                    _tap(gxp, i, j, s, oh, ow)[...] += np.matmul(wt, g4).reshape(B, C, oh, ow)
        return gxp, gw

    return out, backward_core


def _conv_im2col(xp, wd, spec: ConvSpec, oh, ow):
    B, C = xp.shape[:2]
    O, G, k, s = spec.out_channels, spec.groups, spec.kernel_size, spec.stride
    Cg, Og = C // G, O // G
    cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = cols[:, :, ::s, ::s][:, :, :oh, :ow].reshape(B, G, Cg, oh, ow, k, k)
    w5 = wd.reshape(G, Og, Cg, k, k)
    out = np.einsum("bgcyxij,gocij->bgoyx", cols, w5, optimize=True).reshape(B, O, oh, ow)
    out = np.ascontiguousarray(out, dtype=xp.dtype)

    def backward_core(g):
        g5 = g.astype(xp.dtype, copy=False).reshape(B, G, Og, oh, ow)
        gw = np.einsum("bgoyx,bgcyxij->gocij", g5, cols, optimize=True).reshape(wd.shape)
        gcols = np.einsum("bgoyx,gocij->bgcyxij", g5, w5, optimize=True).reshape(B, C, oh, ow, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                _tap(gxp, i, j, s, oh, ow)[...] += gcols[..., i, j]
        return gxp, gw.astype(xp.dtype, copy=False)

    return out, backward_core


@dataclass
class BatchNormState:
    """Affine parameters and running statistics of one BatchNorm2d layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        dt = get_default_dtype()
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dt), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dt), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dt),
            running_var=np.ones(channels, dtype=dt),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm2d(x: Tensor, state: BatchNormState, mode: Literal["train", "eval"] = "train") -> Tensor:
    """Per-channel normalization over (batch, height, width).

    Train mode normalizes with biased batch variance and folds the unbiased
    estimate into ``state.running_var``; eval mode uses the running statistics.
    """
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm2d over {state.channels} channels got input {x.shape}")
    B, C, H, W = x.shape
    gamma, beta = state.gamma, state.beta
    gd = gamma.data[None, :, None, None]
    if mode == "train":
        n = B * H * W
        if n < 2:
            raise ValueError("train-mode batchnorm needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.data.dtype)
        xhat = centered * inv_std[None, :, None, None]
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var * (n / (n - 1))).astype(
            state.running_var.dtype)

        def backward(g):
            dgamma = np.einsum("bchw,bchw->c", g, xhat)
            dbeta = g.sum(axis=(0, 2, 3))
            scale = gd * inv_std[None, :, None, None]
            gx = scale * (g - (dbeta / n)[None, :, None, None] - xhat * (dgamma / n)[None, :, None, None])
            return gx, dgamma, dbeta
    elif mode == "eval":
        inv_std = (1.0 / np.sqrt(state.running_var + state.eps)).astype(x.data.dtype)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]

        def backward(g):
            dgamma = np.einsum("bchw,bchw->c", g, xhat)
            dbeta = g.sum(axis=(0, 2, 3))
            return g * gd * inv_std[None, :, None, None], dgamma, dbeta
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out = xhat * gd + beta.data[None, :, None, None]
    return _make(out, (x, gamma, beta), backward, "batchnorm2d")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize across channels independently at every (batch, row, col) position."""
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"layernorm gamma/beta {gamma.shape}/{beta.shape} do not fit input {x.shape}")
    C = x.shape[1]
    mean = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = centered * inv_std
    gd = gamma.data[None, :, None, None]

    def backward(g):
        dgamma = np.einsum("bchw,bchw->c", g, xhat)
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        gx = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True) / C)
        return gx, dgamma, dbeta

    out = xhat * gd + beta.data[None, :, None, None]
    return _make(out, (x, gamma, beta), backward, "layernorm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * (xd * xd * xd)))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _make(out.astype(xd.dtype, copy=False), (x,), backward, "gelu")


_RELU_TRACE: Optional[list] = None


@contextlib.contextmanager
def trace_relu_masks():
    """Collect the on/off pattern of every relu evaluated inside the block."""
    global _RELU_TRACE
    prev, _RELU_TRACE = _RELU_TRACE, []
    try:
        yield _RELU_TRACE
    finally:
        _RELU_TRACE = prev


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _RELU_TRACE is not None:
        _RELU_TRACE.append(mask)
    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects B x C x H x W, got {x.shape}")
    B, C, H, W = x.shape
    n = H * W

    def backward(g):
        return (np.broadcast_to((g / n)[:, :, None, None], (B, C, H, W)).astype(g.dtype),)

    return _make(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in_features, out_features)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def backward(g):
        return g @ wd.T, xd.T @ g, (g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "linear")


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes), dtype=get_default_dtype())
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Batch-mean cross-entropy of ``logits`` against soft-label rows ``targets``."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise ShapeError(f"targets {t.shape} do not match logits {logits.shape}")
    if (t < 0).any() or not np.allclose(t.sum(axis=1, dtype=np.float64), 1.0, rtol=0, atol=1e-5):
        raise ValueError("every target row must be a probability distribution")
    B = logits.shape[0]
    ld = logits.data
    z = ld - ld.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_z
    # 0 * log p contributes 0 even where p underflows
    loss = -np.where(t > 0, t * log_p, 0).sum(dtype=np.float64) / B

    def backward(g):
        return (g * (np.exp(log_p) - t) / B).astype(ld.dtype, copy=False), None

    parents = (logits, targets) if isinstance(targets, Tensor) else (logits,)
    return _make(np.asarray(loss, dtype=ld.dtype), parents, backward, "softmax_cross_entropy")
