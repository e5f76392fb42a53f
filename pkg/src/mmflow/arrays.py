"""Shaped float32 array files.

Layout (all little-endian)::

    magic   4 bytes  b"MMFA"
    rank    uint32
    dtype   uint32   (1 = float32)
    dims    rank x uint64
    payload row-major float32 values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MMFA"
DTYPE_F32 = 1


class ArrayFormatError(ValueError):
    pass


def encode_array(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<II", arr.ndim, DTYPE_F32)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_array(buf: bytes) -> np.ndarray:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise ArrayFormatError("bad magic bytes")
    rank, dtype = struct.unpack_from("<II", buf, 4)
    if dtype != DTYPE_F32:
        raise ArrayFormatError(f"unsupported element type code {dtype}")
    offset = 12 + 8 * rank
    if len(buf) < offset:
        raise ArrayFormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 12)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - offset != 4 * count:
        raise ArrayFormatError(
            f"payload holds {(len(buf) - offset) // 4} values, header declares {count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims).copy()


def save_array(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_array(array))


def load_array(path) -> np.ndarray:
    return decode_array(Path(path).read_bytes())


def load_feature_array(path, expected_dim: int) -> np.ndarray:
    """Load a ``[T, expected_dim]`` feature matrix, rejecting bad widths and non-finite values."""
    arr = load_array(path)
    if arr.ndim != 2:
        raise ArrayFormatError(f"{path}: expected a rank-2 feature matrix, got rank {arr.ndim}")
    if arr.shape[1] != expected_dim:
        raise ArrayFormatError(
            f"{path}: dim mismatch, expected {expected_dim} columns, got {arr.shape[1]}")
    if not np.isfinite(arr).all():
        raise ArrayFormatError(f"{path}: contains non-finite values")
    return arr
