"""Hot convolution kernels with compiled/fallback selection at import.

The Cython extension is optional.  ``TRNET_FORCE_FALLBACK=1`` forces the
numpy implementation (useful for benchmarking and for installs without
a compiler); ``BACKEND`` reports which one is live.  The public
wrappers validate layouts and meter MACs, then dispatch.
"""

import os

import numpy as np

from ..counting import add_macs
from . import conv_np

BACKEND = "numpy"
_impl = conv_np
if os.environ.get("TRNET_FORCE_FALLBACK", "") != "1":
    try:
        from . import _conv_cy as _impl_cy

        _impl = _impl_cy
        BACKEND = "cython"
    except ImportError:
        pass

__all__ = ["BACKEND", "conv2d", "conv2d_grad_input", "conv2d_grad_kernel", "out_size"]

out_size = conv_np.out_size


def _check_pair(x, k):
    if x.ndim != 4:
        raise ValueError(f"activations must have 4 modes (B, H, W, C), got {x.shape}")
    if k.ndim != 4 or k.shape[0] != k.shape[1]:
        raise ValueError(f"kernel must have shape (D, D, Cin, Cout), got {k.shape}")
    if x.shape[3] != k.shape[2]:
        raise ValueError(
            f"channel mismatch: activations carry {x.shape[3]}, kernel expects {k.shape[2]}")


def _c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d(x, k, stride=1, pad=0):
    """Batched convolution: (B, H, W, Cin) * (D, D, Cin, Cout) -> (B, H', W', Cout)."""
    x = _c64(x)
    k = _c64(k)
    _check_pair(x, k)
    if stride < 1 or pad < 0:
        raise ValueError(f"need stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    b, h, w, ci = x.shape
    d, _, _, co = k.shape
    ho = out_size(h, d, stride, pad)
    wo = out_size(w, d, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"empty output: input {h}x{w}, filter {d}, stride {stride}, pad {pad} "
            f"gives {ho}x{wo}")
    add_macs(b * ho * wo * d * d * ci * co)
    return _impl.conv2d_fwd(x, k, stride, pad)


def conv2d_grad_input(gy, k, stride, pad, h, w):
    """Adjoint of conv2d with respect to the activations."""
    gy = _c64(gy)
    k = _c64(k)
    b, ho, wo, co = gy.shape
    d, _, ci, _ = k.shape
    add_macs(b * ho * wo * d * d * ci * co)
    return _impl.conv2d_bwd_x(gy, k, stride, pad, h, w)


def conv2d_grad_kernel(x, gy, stride, pad, d):
    """Adjoint of conv2d with respect to the kernel."""
    x = _c64(x)
    gy = _c64(gy)
    b, ho, wo, co = gy.shape
    ci = x.shape[3]
    add_macs(b * ho * wo * d * d * ci * co)
    return _impl.conv2d_bwd_k(x, gy, stride, pad, d)
