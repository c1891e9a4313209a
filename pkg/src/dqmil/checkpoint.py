"""DQML model checkpoints.

Layout (little-endian)::

    magic        b"DQML"
    version      u16
    config_len   u32, then config_len bytes of UTF-8 JSON (model config + seed)
    n_params     u32
    per parameter:
        name_len u16, name bytes (UTF-8)
        ndim     u8, then ndim x u32 extents
        values   float32, row-major

Values are always stored as float32; a 64-bit model is rounded on save.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import ByteReader
from .errors import FormatError, SchemaError, VersionError
from .model import DQConfig, DQModel

CKPT_MAGIC = b"DQML"
CKPT_VERSION = 1


def encode_checkpoint(model: DQModel, extra: dict | None = None) -> bytes:
    config = json.dumps({"model": model.config.to_dict(), **(extra or {})}, sort_keys=True).encode("utf-8")
    named = list(model.named_parameters())
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(config)), config, struct.pack("<I", len(named))]
    for name, p in named:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{p.data.ndim}I", p.data.ndim, *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes):
    """Returns ``(config_dict, {name: float32 array})``."""
    r = ByteReader(buf)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic, expected {CKPT_MAGIC!r}", 0)
    version, config_len = r.unpack("<HI", "header")
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported DQML version {version}; this reader handles version {CKPT_VERSION}", 4)
    config = json.loads(r.take(config_len, "config block").decode("utf-8"))
    (count,) = r.unpack("<I", "parameter count")
    params = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "parameter name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(4 * n, f"{name} values"), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last parameter", r.pos)
    return config, params


def save_checkpoint(model: DQModel, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, extra))


def load_checkpoint(path) -> DQModel:
    """Rebuild the model from its config block and copy the stored tensors in.

    The model is created at the current session precision.
    """
    config, params = decode_checkpoint(Path(path).read_bytes())
    model = DQModel(DQConfig(**config["model"]), seed=0)
    named = dict(model.named_parameters())
    if set(named) != set(params):
        raise SchemaError(f"checkpoint parameters do not match the model: "
                          f"missing {sorted(set(named) - set(params))}, unexpected {sorted(set(params) - set(named))}")
    for name, p in named.items():
        if p.data.shape != params[name].shape:
            raise SchemaError(f"{name}: checkpoint shape {params[name].shape} != model shape {p.data.shape}")
        p.data = params[name].astype(p.data.dtype)
    return model
