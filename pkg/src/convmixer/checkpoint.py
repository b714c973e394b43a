"""Minimal binary checkpoint container.

Layout (all integers little-endian)::

    b"CMIX"  u32 version
    u32 n  + n bytes   run config as key = value text (UTF-8)
    u64 step
    u32 count, then per tensor:
        u16 n + n bytes name, u8 ndim, ndim x u32 dims, float32 payload
    u32 n  + n bytes   metadata JSON (sorted keys)

Tensor names carry a section prefix: ``param:``, ``buffer:``, ``adam.m:`` and
``adam.v:``. The stored config omits ``out_dir``, so identical runs written to
different directories produce identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .model import ConvMixer, build
from .optim import OptimizerState
from .tensor import ShapeError

MAGIC = b"CMIX"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: Optional[OptimizerState] = None
    step: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: ConvMixer, config: RunConfig, optimizer: Optional[OptimizerState] = None,
                   step: int = 0, meta: Optional[dict[str, Any]] = None) -> "Checkpoint":
        return cls(
            config=config,
            params={k: t.data.astype(np.float32, copy=True) for k, t in model.parameters().items()},
            buffers={k: v.astype(np.float32, copy=True) for k, v in model.buffers().items()},
            optimizer=optimizer,
            step=step,
            meta=dict(meta or {}),
        )

    def to_model(self) -> ConvMixer:
        model = build(self.config.model, seed=self.config.seed)
        load_into(model, self)
        return model

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", VERSION))
        _write_blob(buf, config_mod.dumps(self.config.replace(out_dir="")).encode())
        buf.write(struct.pack("<Q", self.step))
        tensors = self._named_tensors()
        buf.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            raw = name.encode()
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        meta = dict(self.meta)
        if self.optimizer is not None:
            meta["optimizer_t"] = self.optimizer.t
        _write_blob(buf, json.dumps(meta, sort_keys=True).encode())
        return buf.getvalue()

    def _named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"param:{k}", v) for k, v in self.params.items()]
        out += [(f"buffer:{k}", v) for k, v in self.buffers.items()]
        if self.optimizer is not None:
            out += [(f"adam.m:{k}", v) for k, v in self.optimizer.m.items()]
            out += [(f"adam.v:{k}", v) for k, v in self.optimizer.v.items()]
        return out

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        buf = io.BytesIO(raw)
        if buf.read(4) != MAGIC:
            raise CheckpointError("not a CMIX checkpoint")
        (version,) = _unpack(buf, "<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        cfg = config_mod.loads(_read_blob(buf).decode())
        (step,) = _unpack(buf, "<Q")
        (count,) = _unpack(buf, "<I")
        sections: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "adam.m": {}, "adam.v": {}}
        for _ in range(count):
            (n,) = _unpack(buf, "<H")
            name = buf.read(n).decode()
            (ndim,) = _unpack(buf, "<B")
            shape = _unpack(buf, f"<{ndim}I")
            size = int(np.prod(shape, dtype=np.int64))
            payload = buf.read(4 * size)
            if len(payload) != 4 * size:
                raise CheckpointError(f"truncated payload for {name}")
            section, _, key = name.partition(":")
            if section not in sections:
                raise CheckpointError(f"unknown tensor section in {name!r}")
            sections[section][key] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        meta = json.loads(_read_blob(buf).decode())
        if buf.read(1):
            raise CheckpointError("trailing bytes after metadata")
        optimizer = None
        if "optimizer_t" in meta:
            optimizer = OptimizerState(m=sections["adam.m"], v=sections["adam.v"], t=int(meta.pop("optimizer_t")))
        return cls(cfg, sections["param"], sections["buffer"], optimizer, step, meta)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def load_into(model: ConvMixer, ckpt: Checkpoint) -> None:
    params = model.parameters()
    if set(params) != set(ckpt.params):
        missing = sorted(set(params) ^ set(ckpt.params))
        raise CheckpointError(f"parameter names differ from the model: {missing[:5]}")
    for name, t in params.items():
        arr = ckpt.params[name]
        if arr.shape != t.shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
        t.data = arr.astype(t.data.dtype, copy=True)
    for name, arr in ckpt.buffers.items():
        model.set_buffer(name, arr)


def _write_blob(buf: io.BytesIO, data: bytes) -> None:
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def _read_blob(buf: io.BytesIO) -> bytes:
    (n,) = _unpack(buf, "<I")
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _unpack(buf: io.BytesIO, fmt: str):
    size = struct.calcsize(fmt)
    data = buf.read(size)
    if len(data) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, data)
