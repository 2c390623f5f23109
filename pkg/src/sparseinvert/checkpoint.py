"""Binary model checkpoints.

Layout, all integers little-endian u32 unless noted:

    magic   4 bytes, b"SMIV"
    version u32 (currently 1)
    config  u32 byte length, then that many bytes of UTF-8 JSON
    count   u32 number of tensor blocks
    blocks  per tensor: u32 name length, name bytes, u32 ndim,
            ndim * u32 dims, then the values as little-endian f32
            in C order

Parameters live in float64 in memory but are stored as f32, so a load
rounds to f32 once; save -> load -> save is byte-identical because the
round has already happened.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from . import vit as V
from .data import BadMagic, TruncatedFile
from .tensor import Tensor

MAGIC = b"SMIV"
VERSION = 1


class VersionMismatch(ValueError):
    pass


class CorruptCheckpoint(ValueError):
    pass


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def serialize(model: V.VitModel) -> bytes:
    cfg_json = json.dumps(asdict(model.config), sort_keys=True).encode()
    out = [MAGIC, _u32(VERSION), _u32(len(cfg_json)), cfg_json,
           _u32(len(model.params))]
    for name, t in model.params.items():
        nb = name.encode()
        arr = np.asarray(t.data, dtype="<f4")
        out.append(_u32(len(nb)))
        out.append(nb)
        out.append(_u32(arr.ndim))
        out.extend(_u32(d) for d in arr.shape)
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def save_checkpoint(model: V.VitModel, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(
                f"checkpoint ends at byte {len(self.buf)}, needed {self.pos + n}")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def deserialize(buf: bytes) -> V.VitModel:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise BadMagic("not a SMIV checkpoint")
    version = r.u32()
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    try:
        cfg_dict = json.loads(r.take(r.u32()).decode())
        config = V.VitConfig(**cfg_dict)
    except (ValueError, TypeError) as e:
        if isinstance(e, TruncatedFile):
            raise
        raise CorruptCheckpoint(f"bad config block: {e}") from e
    params: dict[str, Tensor] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        shape = tuple(r.u32() for _ in range(r.u32()))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        if name in params:
            raise CorruptCheckpoint(f"duplicate tensor {name!r}")
        params[name] = Tensor(raw.astype(np.float64))
    if r.pos != len(buf):
        raise CorruptCheckpoint(f"{len(buf) - r.pos} trailing bytes")

    expected = set(V.param_names(config))
    got = set(params)
    if got != expected:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise CorruptCheckpoint(f"tensor set mismatch: missing {missing}, extra {extra}")
    for name, t in params.items():
        want = V.param_shape(config, name)
        if t.data.shape != want:
            raise CorruptCheckpoint(f"{name}: shape {t.data.shape}, expected {want}")
    return V.VitModel(config, params)


def load_checkpoint(path) -> V.VitModel:
    with open(path, "rb") as f:
        return deserialize(f.read())
