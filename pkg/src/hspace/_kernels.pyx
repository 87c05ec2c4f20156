# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled gather/scatter kernels for im2col-based convolution.

Column layout is (C*kh*kw, N*Ho*Wo) so a convolution is a single GEMM.
"""
import numpy as np

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _first_valid(Py_ssize_t lo, Py_ssize_t stride) noexcept nogil:
    # smallest o with o * stride >= lo
    if lo <= 0:
        return 0
    return (lo + stride - 1) // stride


cdef inline Py_ssize_t _end_valid(Py_ssize_t hi, Py_ssize_t stride, Py_ssize_t n_out) noexcept nogil:
    # one past the largest o with o * stride <= hi, clipped to n_out
    if hi < 0:
        return 0
    cdef Py_ssize_t end = hi // stride + 1
    return end if end < n_out else n_out


def im2col(real[:, :, :, :] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n_img = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t height = x.shape[2], width = x.shape[3]
    cdef Py_ssize_t out_h = (height + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t out_w = (width + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t plane = out_h * out_w
    if real is float:
        cols_np = np.zeros((chans * kh * kw, n_img * plane), dtype=np.float32)
    else:
        cols_np = np.zeros((chans * kh * kw, n_img * plane), dtype=np.float64)
    cdef real[:, ::1] cols = cols_np
    cdef Py_ssize_t n, c, ki, kj, oy, ox, iy, row, base, ox_lo, ox_hi
    with nogil:
        for c in range(chans):
            for ki in range(kh):
                for kj in range(kw):
                    row = (c * kh + ki) * kw + kj
                    ox_lo = _first_valid(pad - kj, stride)
                    ox_hi = _end_valid(width - 1 + pad - kj, stride, out_w)
                    for n in range(n_img):
                        for oy in range(out_h):
                            iy = oy * stride - pad + ki
                            if iy < 0 or iy >= height:
                                continue
                            base = n * plane + oy * out_w
                            for ox in range(ox_lo, ox_hi):
                                cols[row, base + ox] = x[n, c, iy, ox * stride - pad + kj]
    return cols_np


def col2im(real[:, ::1] cols, tuple shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n_img = shape[0], chans = shape[1], height = shape[2], width = shape[3]
    cdef Py_ssize_t out_h = (height + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t out_w = (width + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t plane = out_h * out_w
    if real is float:
        x_np = np.zeros(shape, dtype=np.float32)
    else:
        x_np = np.zeros(shape, dtype=np.float64)
    cdef real[:, :, :, ::1] x = x_np
    cdef Py_ssize_t n, c, ki, kj, oy, ox, iy, row, base, ox_lo, ox_hi
    with nogil:
        for c in range(chans):
            for ki in range(kh):
                for kj in range(kw):
                    row = (c * kh + ki) * kw + kj
                    ox_lo = _first_valid(pad - kj, stride)
                    ox_hi = _end_valid(width - 1 + pad - kj, stride, out_w)
                    for n in range(n_img):
                        for oy in range(out_h):
                            iy = oy * stride - pad + ki
                            if iy < 0 or iy >= height:
                                continue
                            base = n * plane + oy * out_w
                            for ox in range(ox_lo, ox_hi):
                                x[n, c, iy, ox * stride - pad + kj] += cols[row, base + ox]
    return x_np
