# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for conv/pool inner loops.

Mirrors ``_kernels_np`` bitwise: same accumulation orders, same tie-breaking.
Only data movement and ordered summation happen here; all GEMM work stays in
numpy/BLAS.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.string cimport memcpy

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(cnp.ndarray xp, int kh, int kw, int stride):
    if xp.dtype == np.float32:
        return _im2col[float](xp, kh, kw, stride)
    return _im2col[double](xp, kh, kw, stride)


def col2im(cnp.ndarray col, int n, int c, int hp, int wp, int kh, int kw, int stride):
    if col.dtype == np.float32:
        return _col2im[float](col, n, c, hp, wp, kh, kw, stride)
    return _col2im[double](col, n, c, hp, wp, kh, kw, stride)


def maxpool_argmax(cnp.ndarray xp, int k, int stride):
    if xp.dtype == np.float32:
        return _maxpool_argmax[float](xp, k, stride)
    return _maxpool_argmax[double](xp, k, stride)


def maxpool_scatter(cnp.ndarray gout, cnp.ndarray idx, int n, int c, int hp, int wp):
    if gout.dtype == np.float32:
        return _maxpool_scatter[float](gout, idx, n, c, hp, wp)
    return _maxpool_scatter[double](gout, idx, n, c, hp, wp)


cdef _im2col(real[:, :, :, ::1] xp, int kh, int kw, int stride):
    cdef int n = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef int oh = (hp - kh) // stride + 1
    cdef int ow = (wp - kw) // stride + 1
    cdef Py_ssize_t l = <Py_ssize_t> oh * ow
    dtype = np.float32 if real is float else np.float64
    out = np.empty((c * kh * kw, n * l), dtype=dtype)
    cdef real[:, ::1] col = out
    cdef int b, ch, i, j, y, x
    cdef Py_ssize_t row, base
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (<Py_ssize_t> ch * kh + i) * kw + j
                    base = <Py_ssize_t> b * l
                    if stride == 1:
                        # rows are contiguous spans of ow elements
                        for y in range(oh):
                            memcpy(&col[row, base + y * ow], &xp[b, ch, y + i, j],
                                   <size_t> ow * sizeof(real))
                    else:
                        for y in range(oh):
                            for x in range(ow):
                                col[row, base + y * ow + x] = xp[b, ch, y * stride + i, x * stride + j]
    return out


cdef _col2im(real[:, ::1] col, int n, int c, int hp, int wp, int kh, int kw, int stride):
    cdef int oh = (hp - kh) // stride + 1
    cdef int ow = (wp - kw) // stride + 1
    cdef Py_ssize_t l = <Py_ssize_t> oh * ow
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] img = out
    cdef int b, ch, i, j, y, x
    cdef Py_ssize_t row, base
    # tap-major accumulation, same order as the numpy fallback
    for i in range(kh):
        for j in range(kw):
            for b in range(n):
                for ch in range(c):
                    row = (<Py_ssize_t> ch * kh + i) * kw + j
                    base = <Py_ssize_t> b * l
                    for y in range(oh):
                        for x in range(ow):
                            img[b, ch, y * stride + i, x * stride + j] += col[row, base + y * ow + x]
    return out


cdef _maxpool_argmax(real[:, :, :, ::1] xp, int k, int stride):
    cdef int n = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef int oh = (hp - k) // stride + 1
    cdef int ow = (wp - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c, oh, ow), dtype=dtype)
    idx = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef real[:, :, :, ::1] vals = out
    cdef cnp.int64_t[:, :, :, ::1] pos = idx
    cdef int b, ch, y, x, i, j, by, bx
    cdef real best, v
    cdef cnp.int64_t best_idx
    for b in range(n):
        for ch in range(c):
            for y in range(oh):
                for x in range(ow):
                    by = y * stride
                    bx = x * stride
                    best = xp[b, ch, by, bx]
                    best_idx = <cnp.int64_t> by * wp + bx
                    for i in range(k):
                        for j in range(k):
                            v = xp[b, ch, by + i, bx + j]
                            if v > best:
                                best = v
                                best_idx = <cnp.int64_t> (by + i) * wp + (bx + j)
                    vals[b, ch, y, x] = best
                    pos[b, ch, y, x] = best_idx
    return out, idx


cdef _maxpool_scatter(real[:, :, :, ::1] gout, cnp.int64_t[:, :, :, ::1] idx,
                      int n, int c, int hp, int wp):
    cdef int oh = gout.shape[2], ow = gout.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, hp * wp), dtype=dtype)
    cdef real[:, :, ::1] grad = out
    cdef int b, ch, y, x
    for b in range(n):
        for ch in range(c):
            for y in range(oh):
                for x in range(ow):
                    grad[b, ch, idx[b, ch, y, x]] += gout[b, ch, y, x]
    return out.reshape(n, c, hp, wp)
