"""Training-time augmentation: random-resized-crop + flip, a reduced RandAugment,
random erasing, mixup and CutMix.

Per-sample transforms take a C x H x W float array and an explicit
``numpy.random.Generator``; nothing here touches global random state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .data import Dataset, normalize


@dataclass(frozen=True)
class AugmentConfig:
    mixup_alpha: float = 0.2
    cutmix_alpha: float = 1.0
    erase_prob: float = 0.25
    randaug_n: int = 2
    randaug_m: int = 9
    scale_min: float = 0.08
    use_mixup: bool = True
    use_cutmix: bool = True
    use_erase: bool = True
    use_randaug: bool = True
    use_scaling: bool = True
    use_flip: bool = True

    def __post_init__(self):
        if self.mixup_alpha < 0 or self.cutmix_alpha < 0:
            raise ValueError("mixup/cutmix alphas must be >= 0")
        if not 0 <= self.erase_prob <= 1:
            raise ValueError("erase_prob must lie in [0, 1]")
        if self.randaug_n < 0 or not 0 <= self.randaug_m <= 10:
            raise ValueError("randaug_n must be >= 0 and randaug_m in [0, 10]")
        if not 0 < self.scale_min <= 1:
            raise ValueError("scale_min must lie in (0, 1]")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(use_mixup=False, use_cutmix=False, use_erase=False, use_randaug=False,
                   use_scaling=False, use_flip=False)


# -- label mixing ---------------------------------------------------------------


def mixup(x1: np.ndarray, x2: np.ndarray, y1: np.ndarray, y2: np.ndarray, lam: float):
    if x1.shape != x2.shape or y1.shape != y2.shape:
        raise ValueError(f"mixup shape mismatch: {x1.shape}/{x2.shape}, {y1.shape}/{y2.shape}")
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 1:
        return x1.copy(), y1.copy()
    if lam == 0:
        return x2.copy(), y2.copy()
    img = (lam * x1 + (1 - lam) * x2).astype(x1.dtype)
    return img, (lam * y1 + (1 - lam) * y2).astype(y1.dtype)


def cutmix_box(height: int, width: int, lam_raw: float, rng: np.random.Generator):
    """Box covering about (1 - lam_raw) of the image, centred uniformly and clipped.

    Returns (top, bottom, left, right) with exclusive bottom/right.
    """
    if not 0 <= lam_raw <= 1:
        raise ValueError(f"lambda must lie in [0, 1], got {lam_raw}")
    cut = math.sqrt(1.0 - lam_raw)
    ch, cw = int(height * cut), int(width * cut)
    cy, cx = int(rng.integers(height)), int(rng.integers(width))
    top = min(max(cy - ch // 2, 0), height)
    bottom = min(max(cy + ch - ch // 2, 0), height)
    left = min(max(cx - cw // 2, 0), width)
    right = min(max(cx + cw - cw // 2, 0), width)
    return top, bottom, left, right


def cutmix(
    x1: np.ndarray,
    x2: np.ndarray,
    y1: np.ndarray,
    y2: np.ndarray,
    lam_raw: float,
    rng: Optional[np.random.Generator] = None,
    box: Optional[tuple[int, int, int, int]] = None,
):
    """Paste a box from ``x2`` into ``x1``; returns (image, label, adjusted lambda).

    The label weight is recomputed from the area actually pasted, so clipping
    at the border is reflected in the soft label.
    """
    if x1.shape != x2.shape:
        raise ValueError(f"cutmix shape mismatch: {x1.shape} vs {x2.shape}")
    H, W = x1.shape[-2:]
    if box is None:
        box = cutmix_box(H, W, lam_raw, rng)
    top, bottom, left, right = box
    out = x1.copy()
    out[..., top:bottom, left:right] = x2[..., top:bottom, left:right]
    lam_adj = 1.0 - (bottom - top) * (right - left) / (H * W)
    label = (lam_adj * y1 + (1 - lam_adj) * y2).astype(y1.dtype)
    return out, label, lam_adj


def mix_batch(images: np.ndarray, targets: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Batch-level mixup or CutMix against the reversed batch.

    When both are enabled a fair coin picks one per batch.
    """
    modes = []
    if cfg.use_mixup and cfg.mixup_alpha > 0:
        modes.append("mixup")
    if cfg.use_cutmix and cfg.cutmix_alpha > 0:
        modes.append("cutmix")
    if not modes:
        return images, targets
    mode = modes[0] if len(modes) == 1 else modes[int(rng.random() < 0.5)]
    flipped_x, flipped_y = images[::-1], targets[::-1]
    if mode == "mixup":
        lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
        return mixup(images, flipped_x, targets, flipped_y, lam)
    lam = float(rng.beta(cfg.cutmix_alpha, cfg.cutmix_alpha))
    box = cutmix_box(images.shape[-2], images.shape[-1], lam, rng)
    img, label, _ = cutmix(images, flipped_x, targets, flipped_y, lam, box=box)
    return img, label


# -- per-sample transforms --------------------------------------------------------


def random_erase(
    x: np.ndarray,
    prob: float,
    rng: np.random.Generator,
    area: tuple[float, float] = (0.02, 0.33),
    aspect: tuple[float, float] = (0.3, 3.3),
) -> np.ndarray:
    """With probability ``prob`` replace one in-bounds rectangle by N(0, 1) noise."""
    if prob <= 0 or rng.random() >= prob:
        return x
    C, H, W = x.shape
    target = rng.uniform(*area) * H * W
    ratio = math.exp(rng.uniform(math.log(aspect[0]), math.log(aspect[1])))
    h = min(max(int(round(math.sqrt(target * ratio))), 1), H)
    w = min(max(int(round(math.sqrt(target / ratio))), 1), W)
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    out = x.copy()
    out[:, top:top + h, left:left + w] = rng.standard_normal((C, h, w)).astype(x.dtype)
    return out


def _affine(x: np.ndarray, matrix: np.ndarray, shift=(0.0, 0.0), fill: float = 0.5) -> np.ndarray:
    """Warp each channel; ``matrix`` maps output (row, col) offsets from the centre to input offsets."""
    H, W = x.shape[-2:]
    centre = np.array([(H - 1) / 2, (W - 1) / 2])
    offset = centre - matrix @ centre + np.asarray(shift)
    return np.stack([
        ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="constant", cval=fill)
        for ch in x
    ]).astype(x.dtype)


def _grayscale_mean(x: np.ndarray) -> float:
    if x.shape[0] == 3:
        return float((0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]).mean())
    return float(x.mean())


def _op_translate_x(x, level, sign):
    return _affine(x, np.eye(2), shift=(0.0, sign * level * 0.45 * x.shape[-1]))


def _op_translate_y(x, level, sign):
    return _affine(x, np.eye(2), shift=(sign * level * 0.45 * x.shape[-2], 0.0))


def _op_rotate(x, level, sign):
    a = math.radians(sign * level * 30.0)
    return _affine(x, np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]]))


def _op_shear_x(x, level, sign):
    return _affine(x, np.array([[1.0, 0.0], [sign * level * 0.3, 1.0]]))


def _op_shear_y(x, level, sign):
    return _affine(x, np.array([[1.0, sign * level * 0.3], [0.0, 1.0]]))


def _op_brightness(x, level, sign):
    return x * np.float32(1.0 + sign * level * 0.9)


def _op_contrast(x, level, sign):
    mean = np.float32(_grayscale_mean(x))
    return mean + (x - mean) * np.float32(1.0 + sign * level * 0.9)


def _op_posterize(x, level, sign):
    bits = 8 - int(round(4 * level))
    if bits >= 8:
        return x
    step = 2 ** (8 - bits)
    q = np.floor(np.clip(x, 0, 1) * 255.0 / step) * step
    return (q / 255.0).astype(x.dtype)


def _op_solarize(x, level, sign):
    threshold = 1.0 - level
    return np.where(x > threshold, 1.0 - x, x).astype(x.dtype)


RANDAUG_OPS = {
    "translate_x": _op_translate_x,
    "translate_y": _op_translate_y,
    "rotate": _op_rotate,
    "shear_x": _op_shear_x,
    "shear_y": _op_shear_y,
    "brightness": _op_brightness,
    "contrast": _op_contrast,
    "posterize": _op_posterize,
    "solarize": _op_solarize,
}
_OP_NAMES = tuple(RANDAUG_OPS)


def rand_augment_lite(x: np.ndarray, n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Apply ``n`` ops drawn uniformly from :data:`RANDAUG_OPS` at magnitude m/10, then clamp."""
    if not 0 <= m <= 10:
        raise ValueError(f"magnitude must lie in [0, 10], got {m}")
    if n == 0:
        return x
    level = m / 10.0
    out = x
    for _ in range(n):
        name = _OP_NAMES[int(rng.integers(len(_OP_NAMES)))]
        sign = 1.0 if rng.random() < 0.5 else -1.0
        out = RANDAUG_OPS[name](out, level, sign)
    return np.clip(out, 0.0, 1.0).astype(x.dtype)


def _crop_box(H: int, W: int, scale, ratio, rng: np.random.Generator):
    area = H * W
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_r))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    # degenerate draws: centre crop at the clamped aspect ratio
    in_ratio = W / H
    if in_ratio < ratio[0]:
        w, h = W, int(round(W / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = H, int(round(H * ratio[1]))
    else:
        h, w = H, W
    return (H - h) // 2, (W - w) // 2, h, w


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a C x H x W array."""
    H, W = x.shape[-2:]
    ys = (np.arange(out_h) + 0.5) * (H / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (W / out_w) - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([
        ndimage.map_coordinates(ch, grid, order=1, mode="nearest") for ch in x
    ]).astype(x.dtype)


def random_resized_crop_flip(
    x: np.ndarray,
    out_size: int,
    scale_range: tuple[float, float],
    rng: np.random.Generator,
    ratio: tuple[float, float] = (3 / 4, 4 / 3),
    flip_prob: float = 0.5,
) -> np.ndarray:
    lo, hi = scale_range
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"scale_range must lie in (0, 1], got {scale_range}")
    C, H, W = x.shape
    top, left, h, w = _crop_box(H, W, scale_range, ratio, rng)
    crop = x[:, top:top + h, left:left + w]
    if (h, w) != (out_size, out_size):
        crop = resize_bilinear(crop, out_size, out_size)
    else:
        crop = crop.copy()
    if flip_prob > 0 and rng.random() < flip_prob:
        crop = crop[:, :, ::-1].copy()
    return crop


class Augmenter:
    """The full per-batch pipeline: geometric/photometric ops, normalization,
    erasing, then batch-level mixing.

    Images enter in [0, 1]; they stay in [0, 1] until normalization.
    """

    def __init__(self, cfg: AugmentConfig, stats: Dataset, out_size: int = 32):
        self.cfg = cfg
        self.stats = stats
        self.out_size = out_size

    def sample(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Per-sample ops up to (not including) normalization; output in [0, 1]."""
        cfg = self.cfg
        if cfg.use_scaling or cfg.use_flip:
            scale = (cfg.scale_min, 1.0) if cfg.use_scaling else (1.0, 1.0)
            ratio = (3 / 4, 4 / 3) if cfg.use_scaling else (1.0, 1.0)
            x = random_resized_crop_flip(x, self.out_size, scale, rng, ratio,
                                         flip_prob=0.5 if cfg.use_flip else 0.0)
        elif x.shape[-1] != self.out_size or x.shape[-2] != self.out_size:
            x = resize_bilinear(x, self.out_size, self.out_size)
        if cfg.use_randaug and cfg.randaug_n > 0:
            x = rand_augment_lite(x, cfg.randaug_n, cfg.randaug_m, rng)
        return np.clip(x, 0.0, 1.0)

    def __call__(self, images: np.ndarray, targets: np.ndarray, rng: np.random.Generator):
        out = np.stack([self.sample(img, rng) for img in images])
        out = normalize(self.stats, out)
        if self.cfg.use_erase and self.cfg.erase_prob > 0:
            out = np.stack([random_erase(img, self.cfg.erase_prob, rng) for img in out])
        return mix_batch(out, targets, self.cfg, rng)
