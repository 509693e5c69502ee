"""Dense multiway arrays and the primitives everything else builds on.

Row-major reshape (a pure reinterpretation of the flat buffer), general
pairwise contraction with MAC metering, a direct 2-D convolution used
as ground truth, and the ``.trt`` binary tensor format.  All numerics
are float64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .counting import add_macs

__all__ = [
    "DenseTensor",
    "ConvSpec",
    "as_ndarray",
    "reshape",
    "contract",
    "tensordot_counted",
    "conv2d_reference",
    "save_trt",
    "load_trt",
    "dumps_trt",
    "loads_trt",
]

TRT_MAGIC = b"TRT1"
_DTYPE_F64 = 0


def _prod(sizes) -> int:
    return math.prod(int(s) for s in sizes)


class DenseTensor:
    """Immutable real array with explicit mode sizes.

    Wraps a float64 C-ordered ndarray; the buffer is copied on
    construction and write-protected, so a DenseTensor can be shared
    freely.  ``shape``, if given, reinterprets the flat buffer
    row-major.
    """

    __slots__ = ("_array",)

    def __init__(self, data, shape=None):
        arr = np.array(data, dtype=np.float64, order="C")
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if arr.size != _prod(shape):
                raise ValueError(
                    f"cannot view {arr.size} entries as shape {shape} "
                    f"(product {_prod(shape)})")
            arr = arr.reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor entries must be finite")
        arr.flags.writeable = False
        self._array = arr

    @property
    def array(self) -> np.ndarray:
        """The underlying read-only ndarray."""
        return self._array

    @property
    def shape(self) -> tuple:
        return self._array.shape

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    def item(self) -> float:
        return self._array.item()

    def __repr__(self) -> str:
        return f"DenseTensor(shape={self.shape})"


def as_ndarray(x) -> np.ndarray:
    """Coerce DenseTensor or array-like to a float64 ndarray."""
    if isinstance(x, DenseTensor):
        return x.array
    return np.asarray(x, dtype=np.float64)


def reshape(t: DenseTensor, new_shape) -> DenseTensor:
    """Row-major regrouping of modes; the flat buffer is untouched."""
    new_shape = tuple(int(s) for s in new_shape)
    if _prod(new_shape) != t.size:
        raise ValueError(
            f"cannot reshape {t.shape} (size {t.size}) to {new_shape} "
            f"(size {_prod(new_shape)})")
    return DenseTensor(t.array.reshape(new_shape))


def _check_axes(name, ndim, axes):
    axes = [int(a) for a in axes]
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate contraction axes for {name}: {axes}")
    for a in axes:
        if not 0 <= a < ndim:
            raise ValueError(f"axis {a} out of range for {name} with {ndim} modes")
    return axes


def tensordot_counted(a: np.ndarray, b: np.ndarray, a_axes, b_axes) -> np.ndarray:
    """np.tensordot plus validation and MAC metering.

    MACs = (product of contracted sizes) * (product of all free sizes);
    flops_2x is exactly twice that.
    """
    a_axes = _check_axes("left operand", a.ndim, a_axes)
    b_axes = _check_axes("right operand", b.ndim, b_axes)
    if len(a_axes) != len(b_axes):
        raise ValueError(f"axis lists differ in length: {a_axes} vs {b_axes}")
    for ax_a, ax_b in zip(a_axes, b_axes):
        if a.shape[ax_a] != b.shape[ax_b]:
            raise ValueError(
                f"size mismatch on contracted pair (axis {ax_a}: {a.shape[ax_a]}) "
                f"vs (axis {ax_b}: {b.shape[ax_b]})")
    contracted = _prod(a.shape[ax] for ax in a_axes)
    free = (a.size // max(contracted, 1)) * (b.size // max(contracted, 1))
    add_macs(contracted * free)
    return np.tensordot(a, b, axes=(a_axes, b_axes))


def contract(a: DenseTensor, a_axes, b: DenseTensor, b_axes) -> DenseTensor:
    """Contract paired axes of two tensors.

    Result modes are the free modes of ``a`` in order, then the free
    modes of ``b`` in order.  Contracting all axes of both yields a
    0-mode (scalar) tensor.
    """
    out = tensordot_counted(as_ndarray(a), as_ndarray(b), a_axes, b_axes)
    return DenseTensor(out)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 2-D convolution: square filter, symmetric zero padding."""

    height: int
    width: int
    in_channels: int
    out_channels: int
    filter_size: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("height", "width", "in_channels", "out_channels", "filter_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.out_height < 1 or self.out_width < 1:
            raise ValueError(
                f"empty output map: {self.height}x{self.width} input, filter "
                f"{self.filter_size}, stride {self.stride}, padding {self.padding}")

    @property
    def out_height(self) -> int:
        return (self.height + 2 * self.padding - self.filter_size) // self.stride + 1

    @property
    def out_width(self) -> int:
        return (self.width + 2 * self.padding - self.filter_size) // self.stride + 1


def conv2d_reference(x: DenseTensor, kernel: DenseTensor, spec: ConvSpec) -> DenseTensor:
    """Direct convolution of one sample; the ground-truth path.

    ``x``: (H, W, Cin); ``kernel``: (D, D, Cin, Cout); output
    (H', W', Cout) with out[h0, w0] summing in[h0*s + d1 - p, w0*s + d2 - p]
    over the filter window, zero outside the input, no kernel flip.
    """
    xa = as_ndarray(x)
    ka = as_ndarray(kernel)
    if xa.shape != (spec.height, spec.width, spec.in_channels):
        raise ValueError(f"input shape {xa.shape} does not match spec "
                         f"{(spec.height, spec.width, spec.in_channels)}")
    want_k = (spec.filter_size, spec.filter_size, spec.in_channels, spec.out_channels)
    if ka.shape != want_k:
        raise ValueError(f"kernel shape {ka.shape} does not match spec {want_k}")
    y = _kernels.conv2d(xa[None], ka, stride=spec.stride, pad=spec.padding)[0]
    return DenseTensor(y)


# --- .trt format ----------------------------------------------------------
#
#   magic   4 bytes   b"TRT1"
#   dtype   u8        0 = float64 little-endian
#   ndim    u8
#   dims    ndim * u64 little-endian
#   payload prod(dims) * 8 bytes, row-major

def dumps_trt(t) -> bytes:
    arr = as_ndarray(t)
    if arr.ndim > 255:
        raise ValueError("too many modes for the format (max 255)")
    head = TRT_MAGIC + struct.pack("<BB", _DTYPE_F64, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return head + dims + payload


def loads_trt(buf: bytes, offset: int = 0):
    """Decode one tensor record; returns (DenseTensor, next_offset)."""
    if len(buf) - offset < 6:
        raise ValueError("truncated tensor record: header incomplete")
    magic = buf[offset:offset + 4]
    if magic != TRT_MAGIC:
        raise ValueError(f"bad magic: expected {TRT_MAGIC!r}, got {magic!r}")
    dtype_tag, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if dtype_tag != _DTYPE_F64:
        raise ValueError(f"unsupported dtype tag {dtype_tag} (only 0 = float64)")
    pos = offset + 6
    if len(buf) - pos < 8 * ndim:
        raise ValueError("truncated tensor record: dimension list incomplete")
    dims = struct.unpack_from(f"<{ndim}Q", buf, pos) if ndim else ()
    pos += 8 * ndim
    count = _prod(dims)
    if len(buf) - pos < 8 * count:
        raise ValueError(
            f"truncated tensor record: payload needs {8 * count} bytes, "
            f"{len(buf) - pos} available")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
    return DenseTensor(arr), pos + 8 * count


def save_trt(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_trt(t))


def load_trt(path) -> DenseTensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = loads_trt(buf)
    if end != len(buf):
        raise ValueError(f"trailing bytes after tensor record: {len(buf) - end}")
    return t
