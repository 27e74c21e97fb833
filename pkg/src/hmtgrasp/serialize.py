"""HMTT tensor dump format.

Layout, all little-endian::

    b"HMTT" | u8 dtype (0=f32, 1=f64) | u32 rank | rank x u32 extents | payload

The payload is the row-major IEEE-754 data.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"HMTT"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    """Corrupt or truncated file."""


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    tag = _TAGS.get(arr.dtype)
    if tag is None:
        raise TypeError(f"HMTT stores float32/float64 only, got {arr.dtype}")
    head = MAGIC + struct.pack("<BI", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    head = fh.read(5)
    if len(head) != 5:
        raise FormatError("truncated header")
    tag, rank = struct.unpack("<BI", head)
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError("truncated extents")
    shape = struct.unpack(f"<{rank}I", raw)
    dtype = _DTYPES[tag]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError(f"truncated payload: expected {nbytes} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def decode_tensor(buf: bytes) -> np.ndarray:
    import io

    fh = io.BytesIO(buf)
    arr = read_tensor(fh)
    if fh.read(1):
        raise FormatError("trailing bytes after tensor record")
    return arr


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
