"""Dense tensor helpers: dtype selection, finiteness checks, binary
serialization and convolution geometry.

Tensors are plain numpy arrays in row-major order; float64 is the testing
precision, float32 the benchmarking one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, NumericError

DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}
MAGIC = b"SCT1"


def resolve_dtype(precision: str) -> np.dtype:
    if precision in ("f32", "float32"):
        return np.dtype(np.float32)
    if precision in ("f64", "float64"):
        return np.dtype(np.float64)
    raise DataError(f"unknown precision {precision!r}")


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")
    return a


def save_tensor(path, a: np.ndarray) -> None:
    """Write ``a`` in the SCT1 format: magic, u8 dtype code, u8 rank,
    u32 dims, then raw little-endian data."""
    # note: ascontiguousarray would promote 0-d arrays to shape (1,)
    a = np.asarray(a, order="C")
    if a.dtype not in DTYPE_CODES:
        raise DataError(f"unsupported dtype {a.dtype}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", DTYPE_CODES[a.dtype], a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise DataError(f"{path}: bad magic, not an SCT1 tensor")
        code, rank = struct.unpack("<BB", fh.read(2))
        if code not in CODE_DTYPES:
            raise DataError(f"{path}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        dtype = CODE_DTYPES[code]
        n = int(np.prod(shape)) if rank else 1
        buf = fh.read(n * dtype.itemsize)
        if len(buf) != n * dtype.itemsize:
            raise DataError(f"{path}: truncated tensor data")
        a = np.frombuffer(buf, dtype=dtype.newbyteorder("<")).astype(dtype)
    return a.reshape(shape)


@dataclass(frozen=True)
class ConvGeometry:
    """Kernel extents plus stride/padding/dilation and the fixed kernel grid.

    ``grid`` enumerates the kernel taps row-major as integer (dy, dx)
    offsets around the kernel center, e.g. [-1,-1],[-1,0],...,[1,1] for 3x3.
    """

    k_h: int
    k_w: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if min(self.k_h, self.k_w, self.stride, self.dilation) < 1 or self.padding < 0:
            raise DimensionError(f"invalid geometry {self}")

    @property
    def K(self) -> int:
        return self.k_h * self.k_w

    @property
    def grid(self) -> np.ndarray:
        d = [
            [ky - (self.k_h - 1) / 2.0, kx - (self.k_w - 1) / 2.0]
            for ky in range(self.k_h)
            for kx in range(self.k_w)
        ]
        return np.asarray(d)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        h2 = (h + 2 * self.padding - self.dilation * (self.k_h - 1) - 1) // self.stride + 1
        w2 = (w + 2 * self.padding - self.dilation * (self.k_w - 1) - 1) // self.stride + 1
        if h2 < 1 or w2 < 1:
            raise DimensionError(
                f"geometry {self} yields empty output for input {h}x{w}"
            )
        return h2, w2
