"""
Binary checkpoint container for parameter maps.

Layout, all integers little-endian:
    magic   8 bytes  b"MODCKPT1"
    version u32
    config  u32 byte length + UTF-8 text
    tensors repeated to EOF:
        name   u32 byte length + UTF-8 name
        rank   u32
        dims   rank * u64
        data   float32 little-endian, row-major

Tensors are written sorted by name, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct

import numpy as np

from .data import FormatError
from .tensor import Tensor

MAGIC = b"MODCKPT1"
VERSION = 1


def save_checkpoint(path: str, params: dict[str, Tensor], config_text: str = "") -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        cfg = config_text.encode("utf-8")
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        for name in sorted(params):
            tensor = params[name]
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            dims = tensor.dims
            f.write(struct.pack("<I", len(dims)))
            f.write(struct.pack(f"<{len(dims)}Q", *dims))
            f.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, Tensor], str]:
    with open(path, "rb") as f:
        blob = f.read()
    view = memoryview(blob)
    if len(view) < len(MAGIC) + 8 or bytes(view[: len(MAGIC)]) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    offset = len(MAGIC)

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = view[offset : offset + n]
        offset += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config_text = bytes(take(cfg_len)).decode("utf-8")

    params: dict[str, Tensor] = {}
    while offset < len(view):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims))
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).copy()
        params[name] = Tensor(arr, requires_grad=True)
    return params, config_text
