"""Binary checkpoint format (little-endian throughout).

::

    magic       4 bytes  b"AKV1"
    version     u16      1
    config      7 x u32  n_layers, d_model, n_heads, d_select, d_ff,
                         vocab_size, max_seq_len
    records until EOF:
      name_len  u16
      name      name_len bytes, UTF-8
      rows      u32
      cols      u32
      data      rows * cols f32, row-major

Weights are float64 in memory and float32 on disk, so a save/load round
trip reproduces ``w.astype(float32)`` exactly, not ``w``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig

MAGIC = b"AKV1"
VERSION = 1
_HEADER = struct.Struct("<4sH7I")
_REC = struct.Struct("<II")
CONFIG_FIELDS = ("n_layers", "d_model", "n_heads", "d_select", "d_ff", "vocab_size", "max_seq_len")


class WeightFileError(ValueError):
    pass


def dumps(model: Model) -> bytes:
    cfg = model.cfg
    parts = [_HEADER.pack(MAGIC, VERSION, *(getattr(cfg, f) for f in CONFIG_FIELDS))]
    for name, arr in model.params.items():
        if arr.ndim != 2:
            raise WeightFileError(f"tensor {name} is not 2-D")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(_REC.pack(*arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes, seed: int = 0) -> Model:
    if len(buf) < _HEADER.size:
        raise WeightFileError("file too short for header")
    magic, version, *fields = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise WeightFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WeightFileError(f"unsupported version {version}")
    cfg = ModelConfig(**dict(zip(CONFIG_FIELDS, fields)), seed=seed)
    pos = _HEADER.size
    params = {}
    while pos < len(buf):
        if pos + 2 > len(buf):
            raise WeightFileError("truncated record header")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        if pos + _REC.size > len(buf):
            raise WeightFileError(f"truncated shape for {name}")
        rows, cols = _REC.unpack_from(buf, pos)
        pos += _REC.size
        n = rows * cols * 4
        if pos + n > len(buf):
            raise WeightFileError(f"truncated data for {name}")
        params[name] = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64)
        pos += n
    return Model(cfg, params)


def save(path, model: Model) -> None:
    Path(path).write_bytes(dumps(model))


def load(path, seed: int = 0) -> Model:
    return loads(Path(path).read_bytes(), seed=seed)


def quantize(model: Model) -> Model:
    """The model as it reads back from disk."""
    return Model(model.cfg, {k: v.astype(np.float32).astype(np.float64) for k, v in model.params.items()})
