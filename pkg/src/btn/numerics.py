"""Dense float64 tensors, interval tensors and the binary tensor format.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64.
Broadcasting is deliberately not part of the public helpers: every binary
operation requires equal shapes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

TENSOR_MAGIC = b"BTNT"
TENSOR_VERSION = 1


class ShapeError(ValueError):
    """Raised when operand shapes disagree."""


class IntervalError(ValueError):
    """Raised when an interval has lower > upper somewhere."""


class FormatError(ValueError):
    """Malformed binary tensor data."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def as_tensor(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch for {what}: {tuple(a.shape)} vs {tuple(b.shape)}")


_BINARY: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Apply ``op`` elementwise. ``abs`` takes a single operand."""
    a = as_tensor(a)
    if op == "abs":
        if b is not None:
            raise TypeError("abs takes one operand")
        return np.abs(a)
    try:
        fn = _BINARY[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    b = as_tensor(b)
    check_same_shape(a, b)
    return fn(a, b)


def reduce_sum(a) -> float:
    """Sum all entries strictly left to right over the flat row-major data."""
    flat = as_tensor(a).ravel()
    if flat.size == 0:
        return 0.0
    # add.accumulate is a sequential scan, unlike add.reduce (pairwise)
    return float(np.add.accumulate(flat)[-1])


@dataclass(frozen=True)
class IntervalTensor:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        check_same_shape(self.lower, self.upper, "interval bounds")

    @classmethod
    def point(cls, x) -> "IntervalTensor":
        x = as_tensor(x)
        return cls(x, x.copy())

    @classmethod
    def from_center_radius(cls, center, radius) -> "IntervalTensor":
        return cls(center - radius, center + radius)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.lower.shape

    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def validate(self, tol: float = 0.0) -> "IntervalTensor":
        bad = self.lower > self.upper + tol
        if np.any(bad):
            idx = np.unravel_index(int(np.argmax(bad)), bad.shape)
            raise IntervalError(
                f"lower > upper at index {idx}: {self.lower[idx]!r} > {self.upper[idx]!r}"
            )
        return self


def center_radius(iv: IntervalTensor) -> tuple[np.ndarray, np.ndarray]:
    center = (iv.lower + iv.upper) / 2.0
    radius = (iv.upper - iv.lower) / 2.0
    return center, radius


def contains(iv: IntervalTensor, x, tol: float = 0.0) -> bool:
    x = as_tensor(x)
    check_same_shape(iv.lower, x, "interval and point")
    if tol < 0:
        raise ValueError("tol must be non-negative")
    return bool(np.all(iv.lower - tol <= x) and np.all(x <= iv.upper + tol))


# -- binary format -----------------------------------------------------------
#
# magic "BTNT" | version u8 | rank u8 | extents u32 LE * rank | data f64 LE


def tensor_to_bytes(t) -> bytes:
    t = as_tensor(t)
    if t.ndim > 255:
        raise FormatError("rank exceeds 255")
    head = TENSOR_MAGIC + struct.pack("<BB", TENSOR_VERSION, t.ndim)
    head += struct.pack(f"<{t.ndim}I", *t.shape)
    return head + t.astype("<f8", copy=False).tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return it and the end offset."""
    view = memoryview(buf)

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise TruncatedError(f"need {n} bytes at offset {offset}, have {len(view) - offset}")
        out = view[offset : offset + n]
        offset += n
        return out

    if bytes(take(4)) != TENSOR_MAGIC:
        raise MagicError("bad tensor magic")
    version, rank = struct.unpack("<BB", take(2))
    if version != TENSOR_VERSION:
        raise VersionError(f"unsupported tensor version {version}")
    shape = struct.unpack(f"<{rank}I", take(4 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    return data, offset


def tensor_to_file_bytes(t) -> bytes:
    """Tensor bytes followed by a CRC32 (u32 LE) of everything before it."""
    body = tensor_to_bytes(t)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def tensor_from_file_bytes(buf: bytes, name: str = "<tensor>") -> np.ndarray:
    if len(buf) < 4:
        raise TruncatedError(f"{name}: file too short")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{name}: CRC32 mismatch")
    t, end = tensor_from_bytes(body)
    if end != len(body):
        raise FormatError(f"{name}: {len(body) - end} trailing bytes")
    return t
