# cython: boundscheck=False
# cython: wraparound=False
# cython: cdivision=True
# cython: initializedcheck=False
"""Compiled 2-D convolution kernels.

Same contract as conv_np: activations (B, H, W, C), kernels
(D, D, Cin, Cout), float64 C-contiguous, window map
out[h0] <- in[h0*s + d - p], zero padding, no kernel flip.

The window bounds are clamped outside the hot loops and the channel
loops run over hoisted row pointers, so they are branch-free and
unit-stride (the input-gradient pass works from a transposed kernel
copy for the same reason).
"""

import numpy as np


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t stride) noexcept nogil:
    # smallest out index whose in index (out*stride + off) is >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t stride, Py_ssize_t limit,
                           Py_ssize_t extent) noexcept nogil:
    # one past the largest out index whose in index stays < extent
    cdef Py_ssize_t top = extent - 1 - off
    if top < 0:
        return 0
    top = top // stride + 1
    return top if top < limit else limit


def conv2d_fwd(const double[:, :, :, ::1] x, const double[:, :, :, ::1] k,
               int stride, int pad):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], ci = x.shape[3]
    cdef Py_ssize_t d = k.shape[0], co = k.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - d) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - d) // stride + 1
    y_arr = np.zeros((b, ho, wo, co), dtype=np.float64)
    cdef double[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t ib, io, jo, d1, d2, ic, oc, ii, jj, off, jo0, jo1
    cdef double v
    cdef const double* xrow
    cdef const double* kr
    cdef double* yrow
    with nogil:
        for ib in range(b):
            for io in range(ho):
                for d1 in range(d):
                    ii = io * stride + d1 - pad
                    if ii < 0 or ii >= h:
                        continue
                    for d2 in range(d):
                        off = d2 - pad
                        jo0 = _lo(off, stride)
                        jo1 = _hi(off, stride, wo, w)
                        for jo in range(jo0, jo1):
                            jj = jo * stride + off
                            xrow = &x[ib, ii, jj, 0]
                            yrow = &y[ib, io, jo, 0]
                            for ic in range(ci):
                                v = xrow[ic]
                                kr = &k[d1, d2, ic, 0]
                                for oc in range(co):
                                    yrow[oc] += v * kr[oc]
    return y_arr


def conv2d_bwd_x(const double[:, :, :, ::1] gy, const double[:, :, :, ::1] k,
                 int stride, int pad, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t b = gy.shape[0], ho = gy.shape[1], wo = gy.shape[2], co = gy.shape[3]
    cdef Py_ssize_t d = k.shape[0], ci = k.shape[2]
    gx_arr = np.zeros((b, h, w, ci), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    # (D, D, Cout, Cin) copy so the inner accumulation is unit-stride
    kt_arr = np.ascontiguousarray(np.asarray(k).transpose(0, 1, 3, 2))
    cdef const double[:, :, :, ::1] kt = kt_arr
    cdef Py_ssize_t ib, io, jo, d1, d2, ic, oc, ii, jj, off, jo0, jo1
    cdef double g
    cdef const double* gyrow
    cdef const double* ktr
    cdef double* gxrow
    with nogil:
        for ib in range(b):
            for io in range(ho):
                for d1 in range(d):
                    ii = io * stride + d1 - pad
                    if ii < 0 or ii >= h:
                        continue
                    for d2 in range(d):
                        off = d2 - pad
                        jo0 = _lo(off, stride)
                        jo1 = _hi(off, stride, wo, w)
                        for jo in range(jo0, jo1):
                            jj = jo * stride + off
                            gyrow = &gy[ib, io, jo, 0]
                            gxrow = &gx[ib, ii, jj, 0]
                            for oc in range(co):
                                g = gyrow[oc]
                                ktr = &kt[d1, d2, oc, 0]
                                for ic in range(ci):
                                    gxrow[ic] += g * ktr[ic]
    return gx_arr


def conv2d_bwd_k(const double[:, :, :, ::1] x, const double[:, :, :, ::1] gy,
                 int stride, int pad, Py_ssize_t d):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], ci = x.shape[3]
    cdef Py_ssize_t ho = gy.shape[1], wo = gy.shape[2], co = gy.shape[3]
    gk_arr = np.zeros((d, d, ci, co), dtype=np.float64)
    cdef double[:, :, :, ::1] gk = gk_arr
    cdef Py_ssize_t ib, io, jo, d1, d2, ic, oc, ii, jj, off, jo0, jo1
    cdef double v
    cdef const double* xrow
    cdef const double* gyrow
    cdef double* gkr
    with nogil:
        for ib in range(b):
            for io in range(ho):
                for d1 in range(d):
                    ii = io * stride + d1 - pad
                    if ii < 0 or ii >= h:
                        continue
                    for d2 in range(d):
                        off = d2 - pad
                        jo0 = _lo(off, stride)
                        jo1 = _hi(off, stride, wo, w)
                        for jo in range(jo0, jo1):
                            jj = jo * stride + off
                            xrow = &x[ib, ii, jj, 0]
                            gyrow = &gy[ib, io, jo, 0]
                            for ic in range(ci):
                                v = xrow[ic]
                                gkr = &gk[d1, d2, ic, 0]
                                for oc in range(co):
                                    gkr[oc] += v * gyrow[oc]
    return gk_arr
