"""Pure-numpy conv2d kernels (im2col + BLAS matmul).

Fallback backend used when the compiled extension is unavailable; must
produce the same values as ``_kernels_ext`` up to float64 rounding.
"""

import numpy as np


def _out_size(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def _im2col(xp, kh, kw, stride, ho, wo):
    n, ci = xp.shape[0], xp.shape[1]
    cols = np.empty((n, ci, kh, kw, ho, wo), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + stride * ho:stride,
                                    kx:kx + stride * wo:stride]
    return cols


def conv2d_forward(x, w, stride, pad):
    n, ci, h, wi = x.shape
    co, _, kh, kw = w.shape
    ho, wo = _out_size(h, wi, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    cols2 = cols.reshape(n, ci * kh * kw, ho * wo)
    w2 = w.reshape(co, ci * kh * kw)
    y = np.matmul(w2, cols2)
    return y.reshape(n, co, ho, wo)


def conv2d_backward_input(gy, w, stride, pad, h, wi):
    n, co, ho, wo = gy.shape
    _, ci, kh, kw = w.shape
    w2 = w.reshape(co, ci * kh * kw)
    gy2 = gy.reshape(n, co, ho * wo)
    gcols = np.matmul(w2.T, gy2).reshape(n, ci, kh, kw, ho, wo)
    gxp = np.zeros((n, ci, h + 2 * pad, wi + 2 * pad), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            gxp[:, :, ky:ky + stride * ho:stride,
                kx:kx + stride * wo:stride] += gcols[:, :, ky, kx]
    if pad:
        return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wi])
    return gxp


def conv2d_backward_weight(x, gy, stride, pad, kh, kw):
    n, ci, h, wi = x.shape
    co, ho, wo = gy.shape[1], gy.shape[2], gy.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    cols2 = cols.reshape(n, ci * kh * kw, ho * wo)
    gy2 = gy.reshape(n, co, ho * wo)
    gw2 = np.matmul(gy2, cols2.transpose(0, 2, 1)).sum(axis=0)
    return gw2.reshape(co, ci, kh, kw)
