"""Binary checkpoint file format.

Layout (all integers little-endian):

    magic "JEDI" | version u8 = 1
    tensor count u32
    per tensor: name length u16 | name utf-8 | rank u8 | dims u32 each | f32 data
    footer: training step u64 | config length u32 | config JSON utf-8

Tensors are written in the order given, so a save/load round trip preserves
both values and ordering bit-exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"JEDI"
VERSION = 1


def save_checkpoint(path, tensors, step: int, config: dict):
    """Write named float32 tensors plus a config blob.

    tensors: iterable of (name, array) or a dict; arrays are cast to float32.
    """
    if isinstance(tensors, dict):
        tensors = list(tensors.items())
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<B", VERSION)
    blob += struct.pack("<I", len(tensors))
    for name, array in tensors:
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:32]}...")
        array = np.ascontiguousarray(array, dtype="<f4")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", array.ndim)
        for dim in array.shape:
            blob += struct.pack("<I", dim)
        blob += array.tobytes()
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<Q", step)
    blob += struct.pack("<I", len(config_bytes))
    blob += config_bytes
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors dict, step, config dict)."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    if reader.take(4) != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    version = reader.unpack("<B")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    count = reader.unpack("<I")
    tensors = {}
    for _ in range(count):
        name_len = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        rank = reader.unpack("<B")
        shape = tuple(reader.unpack("<I") for _ in range(rank))
        n_items = int(np.prod(shape)) if shape else 1
        raw = reader.take(n_items * 4)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    step = reader.unpack("<Q")
    config_len = reader.unpack("<I")
    try:
        config = json.loads(reader.take(config_len).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt config block: {exc}") from exc
    if reader.pos != len(reader.data):
        raise FormatError(f"{path}: {len(reader.data) - reader.pos} trailing bytes")
    return tensors, step, config
