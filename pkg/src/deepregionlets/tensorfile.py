"""Bit-exact little-endian tensor files.

Layout::

    b"RGLT" | version u32 (=1) | dtype u8 (0 f32, 1 f64) | ndim u8 |
    dims ndim x u64 | row-major payload

All integers and payload values are little-endian.
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

MAGIC = b"RGLT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorFileError(ValueError):
    pass


def dumps(array) -> bytes:
    a = np.asarray(array)
    if a.dtype not in _CODES:
        raise TensorFileError(f"unsupported dtype {a.dtype}; use float32 or float64")
    if a.ndim > 255:
        raise TensorFileError("too many dimensions")
    code = _CODES[a.dtype]
    head = MAGIC + struct.pack("<IBB", VERSION, code, a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()


def loads(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise TensorFileError("bad magic")
    fixed = buf.read(6)
    if len(fixed) != 6:
        raise TensorFileError("truncated header")
    version, code, ndim = struct.unpack("<IBB", fixed)
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise TensorFileError(f"unknown dtype code {code}")
    raw_dims = buf.read(8 * ndim)
    if len(raw_dims) != 8 * ndim:
        raise TensorFileError("truncated dims")
    dims = struct.unpack(f"<{ndim}Q", raw_dims)
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    payload = buf.read()
    if len(payload) != count * dtype.itemsize:
        raise TensorFileError(
            f"payload is {len(payload)} bytes, expected {count * dtype.itemsize}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def write_tensor(path, array) -> None:
    with open(os.fspath(path), "wb") as f:
        f.write(dumps(array))


def read_tensor(path) -> np.ndarray:
    with open(os.fspath(path), "rb") as f:
        return loads(f.read())
