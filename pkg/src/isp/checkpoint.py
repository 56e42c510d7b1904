"""Versioned binary checkpoint format ("ISPW").

Layout, all integers little-endian:

    magic    4 bytes  b"ISPW"
    version  u32      currently 1
    config   u32 length + UTF-8 flat key = value text
    count    u32      number of named parameter blocks
    blocks   repeated: u16 name length, UTF-8 name,
                       u8 ndim, u32 per dimension,
                       row-major float64 data

Blocks appear in a fixed documented order: all frozen encoder
parameters (creation order, names prefixed "encoder/"), then all
trainable prompt parameters (PromptSet order). Identical state always
serializes to identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ISPW"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def serialize(config_text: str, params: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    blob = config_text.encode("utf-8")
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    out.append(struct.pack("<I", len(params)))
    for name, array in params.items():
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        arr = np.asarray(array, dtype=np.float64)
        out.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            out.append(struct.pack("<I", dim))
        out.append(arr.astype("<f8").tobytes())
    return b"".join(out)


def deserialize(data: bytes) -> tuple[str, dict[str, np.ndarray]]:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad magic bytes; not an ISPW checkpoint")
    offset = 4

    def unpack(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        values = struct.unpack_from(fmt, view, offset)
        offset += size
        return values[0]

    version = unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_len = unpack("<I")
    config_text = bytes(view[offset:offset + config_len]).decode("utf-8")
    offset += config_len
    count = unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = unpack("<H")
        name = bytes(view[offset:offset + name_len]).decode("utf-8")
        offset += name_len
        ndim = unpack("<B")
        shape = tuple(unpack("<I") for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(view, dtype="<f8", count=size, offset=offset)
        offset += size * 8
        params[name] = arr.reshape(shape).astype(np.float64)
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes")
    return config_text, params


def write_checkpoint(path, config_text: str, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(config_text, params))


def read_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
