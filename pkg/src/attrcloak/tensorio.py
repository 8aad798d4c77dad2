"""The ``.ten`` binary tensor format.

Layout: ``b"TENS"`` | u32 version (=1) | u8 ndim | ndim x u64 dims |
little-endian float32 data in C order. All integers little-endian.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TENS"
VERSION = 1
_HEADER = struct.Struct("<4sIB")


class TensorFormatError(ValueError):
    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{path}: {reason}")


def encode(array) -> bytes:
    arr = np.asarray(array)
    if arr.ndim > 255:
        raise ValueError("too many dimensions for .ten")
    head = _HEADER.pack(MAGIC, VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf: bytes, source="<bytes>") -> np.ndarray:
    """Parse ``.ten`` bytes into a float32 array."""
    if len(buf) < _HEADER.size:
        raise TensorFormatError(source, "truncated header")
    magic, version, ndim = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise TensorFormatError(source, f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(source, f"unsupported version {version}")
    off = _HEADER.size
    if len(buf) < off + 8 * ndim:
        raise TensorFormatError(source, "truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = off + 4 * count
    if len(buf) < expected:
        raise TensorFormatError(source, f"truncated data: need {expected} bytes, have {len(buf)}")
    if len(buf) > expected:
        raise TensorFormatError(source, f"{len(buf) - expected} trailing bytes")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def save_tensor(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing tensor file: {path}")
    return decode(path.read_bytes(), source=path)
