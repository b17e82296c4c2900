"""Flat binary parameter container.

Byte layout (all integers little-endian):

    offset  size  field
    0       8     magic ``b"HSPLATCK"``
    8       4     uint32 format version (currently 1)
    12      4     uint32 record count
    then per record:
            2     uint16 name length in bytes
            n     UTF-8 name
            1     uint8 ndim
            8*d   int64 dims
            8*k   float64 values, C order

Names are namespaced with dots (e.g. ``albedo.embed.w0``, ``sdf.w2``,
``points.coords``).
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"HSPLATCK"
VERSION = 1


def save_params(path, params):
    """Write a {name: array} mapping; insertion order is preserved."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(params)))
        for name, arr in params.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            f.write(arr.tobytes())


def load_params(path):
    """Read a checkpoint back into an ordered {name: float64 array} dict."""
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ValueError(f"{path}: not a handsplat checkpoint (bad magic)")
        version, count = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}q", f.read(8 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8")
            out[name] = data.reshape(shape).astype(np.float64)
        return out
