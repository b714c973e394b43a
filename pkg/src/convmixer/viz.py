"""Render learned filters as tile grids and write them as binary PPM images."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint

BACKGROUND = 255


@dataclass(frozen=True)
class Grid:
    image: np.ndarray  # rows x cols x 3, uint8
    n_tiles: int
    tile_size: int
    rows: int
    cols: int
    gap: int
    scale: int

    def tile(self, index: int) -> np.ndarray:
        """Pixels of tile ``index`` (row-major placement)."""
        r, c = divmod(index, self.cols)
        step = self.tile_size * self.scale + self.gap
        y0 = self.gap + r * step
        x0 = self.gap + c * step
        side = self.tile_size * self.scale
        return self.image[y0:y0 + side, x0:x0 + side]


def minmax(tile: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant tile maps to 0.5."""
    lo, hi = float(tile.min()), float(tile.max())
    if hi - lo <= 0:
        return np.full(tile.shape, 0.5)
    return (tile - lo) / (hi - lo)


def tile_grid(tiles: np.ndarray, gap: int = 1, scale: int = 1) -> Grid:
    """Lay out ``tiles`` (n x s x s x 3, values in [0, 1]) on a near-square grid."""
    n, s = tiles.shape[0], tiles.shape[1]
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    side = s * scale
    img = np.full((gap + rows * (side + gap), gap + cols * (side + gap), 3), BACKGROUND, dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        y0 = gap + r * (side + gap)
        x0 = gap + c * (side + gap)
        px = np.rint(tiles[i] * 255).astype(np.uint8)
        if scale > 1:
            px = px.repeat(scale, axis=0).repeat(scale, axis=1)
        img[y0:y0 + side, x0:x0 + side] = px
    return Grid(img, n, s, rows, cols, gap, scale)


def patch_embed_grid(weight: np.ndarray, **kwargs) -> Grid:
    """One p x p tile per hidden channel; RGB when there are three input channels."""
    h, c_in = weight.shape[:2]
    tiles = []
    for w in weight:
        norm = minmax(w)
        rgb = norm.transpose(1, 2, 0) if c_in == 3 else np.repeat(norm.mean(axis=0)[..., None], 3, axis=2)
        tiles.append(rgb)
    return tile_grid(np.stack(tiles), **kwargs)


def depthwise_grid(weight: np.ndarray, max_tiles: int = 64, seed: int = 0, **kwargs) -> Grid:
    """Up to ``max_tiles`` randomly chosen k x k kernels, each in grayscale."""
    h = weight.shape[0]
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(h, size=min(h, max_tiles), replace=False))
    tiles = [np.repeat(minmax(weight[i, 0])[..., None], 3, axis=2) for i in picks]
    return tile_grid(np.stack(tiles), **kwargs)


def render(ckpt: Checkpoint, target: str, seed: int = 0, scale: int = 1) -> Grid:
    """``target`` is ``patch_embed`` or ``blocks.<i>.depthwise`` (``block <i>`` also accepted)."""
    if target == "patch_embed":
        return patch_embed_grid(ckpt.params["patch_embed.weight"], scale=scale)
    name = target.replace(" ", ".")
    parts = name.split(".")
    if parts[0] in ("blocks", "block") and len(parts) in (2, 3) and parts[1].isdigit():
        if len(parts) == 3 and parts[2] != "depthwise":
            raise KeyError(f"unknown visualization target {target!r}")
        i = int(parts[1])
        d = ckpt.config.model.d
        if i >= d:
            raise KeyError(f"block index {i} out of range for depth {d}")
        return depthwise_grid(ckpt.params[f"blocks.{i}.depthwise.weight"], seed=seed, scale=scale)
    raise KeyError(f"unknown visualization target {target!r}")


def write_ppm(path, image: np.ndarray) -> Path:
    path = Path(path)
    h, w = image.shape[:2]
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image, dtype=np.uint8).tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError("not an 8-bit binary PPM")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw[pos + 1:], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError("PPM payload size mismatch")
    return data.reshape(h, w, 3)
