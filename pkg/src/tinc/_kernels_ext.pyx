# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled conv2d kernels (float64, NCHW, zero padding).

The hot data-movement paths (im2col packing and its scatter-add inverse) run
as tight C loops; the surrounding contractions go through BLAS matmuls. The
numpy fallback in ``_kernels_np`` computes the same quantities with vectorized
slice copies; both backends are exercised by the test suite.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef void _im2col(double[:, :, :, ::1] x, double[:, :, ::1] cols,
                  Py_ssize_t kh, Py_ssize_t kw, int stride, int pad,
                  Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wi = x.shape[3]
    cdef Py_ssize_t b, c, ky, kx, oy, ox, iy, ix, row, base
    for b in range(n):
        for c in range(ci):
            for ky in range(kh):
                for kx in range(kw):
                    row = (c * kh + ky) * kw + kx
                    for oy in range(ho):
                        iy = oy * stride + ky - pad
                        base = oy * wo
                        if iy < 0 or iy >= h:
                            for ox in range(wo):
                                cols[b, row, base + ox] = 0.0
                            continue
                        for ox in range(wo):
                            ix = ox * stride + kx - pad
                            if 0 <= ix < wi:
                                cols[b, row, base + ox] = x[b, c, iy, ix]
                            else:
                                cols[b, row, base + ox] = 0.0


cdef void _col2im(double[:, :, ::1] cols, double[:, :, :, ::1] gx,
                  Py_ssize_t kh, Py_ssize_t kw, int stride, int pad,
                  Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t n = gx.shape[0], ci = gx.shape[1], h = gx.shape[2], wi = gx.shape[3]
    cdef Py_ssize_t b, c, ky, kx, oy, ox, iy, ix, row, base
    for b in range(n):
        for c in range(ci):
            for ky in range(kh):
                for kx in range(kw):
                    row = (c * kh + ky) * kw + kx
                    for oy in range(ho):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        base = oy * wo
                        for ox in range(wo):
                            ix = ox * stride + kx - pad
                            if 0 <= ix < wi:
                                gx[b, c, iy, ix] += cols[b, row, base + ox]


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                   int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wi = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wi + 2 * pad - kw) // stride + 1
    cols = np.empty((n, ci * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] cols_v = cols
    with nogil:
        _im2col(x, cols_v, kh, kw, stride, pad, ho, wo)
    w2 = np.asarray(w).reshape(co, ci * kh * kw)
    y = np.matmul(w2, cols)
    return y.reshape(n, co, ho, wo)


def conv2d_backward_input(double[:, :, :, ::1] gy, double[:, :, :, ::1] w,
                          int stride, int pad, Py_ssize_t h, Py_ssize_t wi):
    cdef Py_ssize_t n = gy.shape[0], co = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t ci = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    w2 = np.asarray(w).reshape(co, ci * kh * kw)
    gy2 = np.asarray(gy).reshape(n, co, ho * wo)
    gcols = np.matmul(w2.T, gy2)
    out = np.zeros((n, ci, h, wi), dtype=np.float64)
    cdef double[:, :, ::1] gcols_v = gcols
    cdef double[:, :, :, ::1] gx = out
    with nogil:
        _col2im(gcols_v, gx, kh, kw, stride, pad, ho, wo)
    return out


def conv2d_backward_weight(double[:, :, :, ::1] x, double[:, :, :, ::1] gy,
                           int stride, int pad, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wi = x.shape[3]
    cdef Py_ssize_t co = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cols = np.empty((n, ci * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] cols_v = cols
    with nogil:
        _im2col(x, cols_v, kh, kw, stride, pad, ho, wo)
    gy2 = np.asarray(gy).reshape(n, co, ho * wo)
    gw2 = np.matmul(gy2, cols.transpose(0, 2, 1)).sum(axis=0)
    return np.ascontiguousarray(gw2.reshape(co, ci, kh, kw))
