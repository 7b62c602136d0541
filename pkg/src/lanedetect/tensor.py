"""Rank-4 tensor wrapper.

Every array that flows through the network is a dense (batch, channels,
height, width) block of f32 or f64, C-contiguous, with the buffer marked
read-only.  Ops never mutate their inputs; they allocate fresh outputs.
That discipline is what lets backward passes keep references to forward
activations without defensive copies.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import backend
from .errors import DataError, DomainError, ShapeError, SizeError

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Shape(NamedTuple):
    batch: int
    channels: int
    height: int
    width: int

    def numel(self) -> int:
        return self.batch * self.channels * self.height * self.width


class Tensor:
    """Rank-4 array of f32 or f64, treated as immutable by all ops.

    With copy=True (the default) the tensor owns a frozen private copy.
    copy=False adopts the caller's buffer without changing its
    writeability; used internally to wrap arrays nothing else mutates.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None, copy: bool = True, check: bool = True):
        arr = np.array(data, dtype=dtype, copy=copy)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be rank 4, got rank {arr.ndim}")
        if min(arr.shape) < 1:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        if arr.dtype not in _DTYPES:
            raise DataError(f"tensor dtype must be float32 or float64, got {arr.dtype}")
        if check and not np.isfinite(arr).all():
            raise DataError("tensor contains NaN or Inf")
        arr = np.ascontiguousarray(arr)
        if copy:
            arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> Shape:
        return Shape(*self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numel(self) -> int:
        return self.data.size

    def astype(self, dtype) -> "Tensor":
        return _wrap(self.data.astype(dtype))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype})"


def _wrap(arr: np.ndarray) -> Tensor:
    """Adopt and freeze a freshly built array, skipping the finiteness scan.

    Internal fast path; the caller must be the array's only owner.
    """
    if arr.flags.writeable and arr.flags.c_contiguous:
        arr.flags.writeable = False
    return Tensor(arr, copy=False, check=False)


def zeros(shape, dtype=np.float32) -> Tensor:
    if len(shape) != 4:
        raise ShapeError(f"shape must have 4 entries, got {len(shape)}")
    dims = tuple(int(d) for d in shape)
    if min(dims) < 1:
        raise ShapeError(f"tensor dimensions must be positive, got {dims}")
    n = 1
    for d in dims:
        n *= d
    if n > np.iinfo(np.intp).max:
        raise SizeError(f"element count {n} overflows the index type")
    return _wrap(np.zeros(dims, dtype))


_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Combine two tensors entry by entry.  No broadcasting: shapes must match."""
    fn = _OPS.get(op)
    if fn is None:
        raise DomainError(f"unknown elementwise op {op!r}, expected one of {sorted(_OPS)}")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"elementwise shape mismatch: {a.shape} vs {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise DataError(f"elementwise dtype mismatch: {a.dtype} vs {b.dtype}")
    return _wrap(fn(a.data, b.data))


def reduce_sum(t: Tensor) -> float:
    """Sum of all entries, accumulated in float64 in a fixed order."""
    return backend.impl().sum_f64(t.data.reshape(-1))
