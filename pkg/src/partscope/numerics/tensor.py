"""Dense float64 tensors and the portable on-disk tensor format.

Tensors are plain numpy float64 arrays in C (row-major) order.  The file
format is intentionally dumb so that any language can read it:

    bytes 0..15   magic, ASCII "PGRTENS1" padded with NULs to 16 bytes
    u32 LE        rank
    rank * u32 LE dims
    then          prod(dims) * f64 LE, row-major

All fixture files in the repo (images, masks, precomputed features,
checkpoint parameter blobs) use this encoding.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PGRTENS1" + b"\x00" * 8

Tensor = np.ndarray


class NonFiniteError(ValueError):
    """A tensor that must be finite contains NaN or Inf."""


def as_tensor(data, shape=None) -> Tensor:
    """Coerce to a C-contiguous float64 array, optionally reshaping."""
    # np.ascontiguousarray promotes 0-d to 1-d, so go through asarray first
    arr = np.asarray(data, dtype=np.float64, order="C")
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def check_finite(arr: np.ndarray, context: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{context}: non-finite values present")
    return arr


def tensor_bytes(arr: np.ndarray) -> bytes:
    """Serialize an array to portable-tensor bytes."""
    arr = as_tensor(arr)
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return header + arr.tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Deserialize one tensor; returns (array, next_offset)."""
    if buf[offset : offset + 16] != MAGIC:
        raise ValueError("bad portable-tensor magic")
    offset += 16
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}I", buf, offset) if rank else ()
    offset += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    offset += 8 * count
    return arr.reshape(dims).astype(np.float64), offset


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def load_tensor(path: str | Path) -> Tensor:
    arr, _ = tensor_from_bytes(Path(path).read_bytes())
    return arr
