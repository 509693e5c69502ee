"""Numpy fallback implementation of the 2-D convolution kernels.

Layouts: activations ``(B, H, W, C)``, kernels ``(D, D, Cin, Cout)``,
float64 C-contiguous.  The window map is ``out[h0] <- in[h0*s + d - p]``
with zero padding and no kernel flip (cross-correlation).  Loops run
over the D*D kernel offsets; each offset is a strided slice followed by
a tensordot, so the heavy lifting stays in BLAS.
"""

import numpy as np


def out_size(n, d, stride, pad):
    return (n + 2 * pad - d) // stride + 1


def _padded(x, pad):
    if pad == 0:
        return x
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=np.float64)
    xp[:, pad:pad + h, pad:pad + w, :] = x
    return xp


def conv2d_fwd(x, k, stride, pad):
    b, h, w, ci = x.shape
    d = k.shape[0]
    co = k.shape[3]
    ho = out_size(h, d, stride, pad)
    wo = out_size(w, d, stride, pad)
    xp = _padded(x, pad)
    y = np.zeros((b, ho, wo, co), dtype=np.float64)
    for d1 in range(d):
        for d2 in range(d):
            win = xp[:, d1:d1 + (ho - 1) * stride + 1:stride,
                     d2:d2 + (wo - 1) * stride + 1:stride, :]
            y += np.tensordot(win, k[d1, d2], axes=([3], [0]))
    return y


def conv2d_bwd_x(gy, k, stride, pad, h, w):
    b, ho, wo, _ = gy.shape
    d = k.shape[0]
    ci = k.shape[2]
    gxp = np.zeros((b, h + 2 * pad, w + 2 * pad, ci), dtype=np.float64)
    for d1 in range(d):
        for d2 in range(d):
            g = np.tensordot(gy, k[d1, d2], axes=([3], [1]))
            gxp[:, d1:d1 + (ho - 1) * stride + 1:stride,
                d2:d2 + (wo - 1) * stride + 1:stride, :] += g
    return np.ascontiguousarray(gxp[:, pad:pad + h, pad:pad + w, :])


def conv2d_bwd_k(x, gy, stride, pad, d):
    b, h, w, ci = x.shape
    _, ho, wo, co = gy.shape
    xp = _padded(x, pad)
    gk = np.zeros((d, d, ci, co), dtype=np.float64)
    for d1 in range(d):
        for d2 in range(d):
            win = xp[:, d1:d1 + (ho - 1) * stride + 1:stride,
                     d2:d2 + (wo - 1) * stride + 1:stride, :]
            gk[d1, d2] = np.tensordot(win, gy, axes=([0, 1, 2], [0, 1, 2]))
    return gk
