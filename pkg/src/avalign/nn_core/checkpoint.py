"""Flat named-array checkpoint files.

Layout (all little-endian)::

    b"AVCK"  uint32 version  uint32 n_arrays
    repeated n_arrays times:
        uint32 name_len  name (utf-8)  uint8 dtype_code  uint32 ndim  uint32 * ndim shape
        raw values
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVCK"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1"}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2, np.dtype("uint8"): 3}


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in _CODES:
                arr = arr.astype(np.float64 if arr.dtype.kind == "f" else np.int64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<BI", _CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    tmp.replace(path)


def load_arrays(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + ln].decode("utf-8")
        off += ln
        code, ndim = struct.unpack_from("<BI", buf, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = np.dtype(_DTYPES[code])
        count = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape).copy()
        off += count * dt.itemsize
    return out
