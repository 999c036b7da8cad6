"""Flat binary checkpoint of named tensors.

Layout: magic "PMCK", version u32, tensor count u32; then per tensor:
name length u32, UTF-8 name, rank u32, dims as u64 little-endian, one
element-width byte (4 or 8), raw little-endian element bytes. All
integers little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

from .tensor import StateError, Tensor

MAGIC = b"PMCK"
VERSION = 1


def save_checkpoint(path, named_tensors):
    """Write {name: Tensor-or-ndarray} to a checkpoint file."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(named_tensors)))
        for name in sorted(named_tensors):
            t = named_tensors[name]
            data = t.data if isinstance(t, Tensor) else np.asarray(t)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            width = data.dtype.itemsize
            f.write(struct.pack("<B", width))
            f.write(np.ascontiguousarray(data, dtype=f"<f{width}").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back as {name: ndarray}."""
    out = {}
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise StateError(f"{path} is not a checkpoint (bad magic)")
        version, count = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise StateError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            (width,) = struct.unpack("<B", f.read(1))
            n = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(f.read(n * width), dtype=f"<f{width}").reshape(dims)
            out[name] = arr.copy()
    return out
