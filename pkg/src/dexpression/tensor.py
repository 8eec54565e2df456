"""Dense real-valued arrays and their on-disk encoding.

Tensors are plain ``numpy.ndarray`` values in row-major order, with images laid
out as ``[channels, height, width]``. ``float32`` is the working precision;
``float64`` is used only when checking gradients numerically.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

Tensor = np.ndarray

DTYPE = np.float32
CHECK_DTYPE = np.float64


class SpatialMismatchError(ValueError):
    pass


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not dims or any(d < 1 for d in dims):
        raise ValueError(f"invalid shape {list(shape)}: every extent must be >= 1")
    return dims


def numel(shape: Sequence[int]) -> int:
    return int(np.prod(check_shape(shape), dtype=np.int64))


def zeros(shape: Sequence[int], dtype=DTYPE) -> Tensor:
    return np.zeros(check_shape(shape), dtype=dtype)


def elementwise_map(t: Tensor, f: Callable[[float], float]) -> Tensor:
    """Apply a scalar function to every element, returning a new tensor of the same shape."""
    flat = t.reshape(-1)
    out = np.fromiter((f(v) for v in flat), dtype=t.dtype, count=flat.size)
    return out.reshape(t.shape)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 3 or b.ndim != 3:
        raise ValueError(f"concat_channels expects rank-3 tensors, got {a.shape} and {b.shape}")
    if a.shape[1:] != b.shape[1:]:
        raise SpatialMismatchError(
            f"cannot concatenate {list(a.shape)} and {list(b.shape)}: spatial extents differ"
        )
    return np.concatenate([a, b], axis=0)


def split_channels(t: Tensor, at: int) -> tuple[Tensor, Tensor]:
    return t[:at], t[at:]


# Checkpoint encoding: u32 rank, u32 dims, then little-endian f32 data.

def write_tensor(fh: BinaryIO, t: Tensor) -> None:
    fh.write(struct.pack("<I", t.ndim))
    fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
    fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_tensor(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor from ``buf`` at ``offset``; returns the tensor and the next offset."""
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if rank == 0 or rank > 8:
        raise ValueError(f"implausible tensor rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = numel(dims)
    end = offset + 4 * count
    if end > len(buf):
        raise ValueError("tensor data runs past end of buffer")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    return data.astype(DTYPE).reshape(dims), end
