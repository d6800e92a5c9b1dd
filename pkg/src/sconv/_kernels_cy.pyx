# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: im2col/col2im and deformable bilinear gather/scatter.

Mirrors sconv._kernels_py exactly; selected by sconv.backend when built.
"""

import numpy as np

cimport cython
from libc.math cimport floor

ctypedef fused real:
    float
    double

NAME = "cython"


def im2col(real[:, :, ::1] x, int kh, int kw, int stride, int pad, int dil):
    cdef int C = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef int ho = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    cdef int wo = (w + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out_np = np.zeros((C * kh * kw, ho * wo), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_np
    cdef int c, ky, kx, oy, ox, iy, ix, row
    with nogil:
        for c in range(C):
            for ky in range(kh):
                for kx in range(kw):
                    row = (c * kh + ky) * kw + kx
                    for oy in range(ho):
                        iy = oy * stride - pad + ky * dil
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(wo):
                            ix = ox * stride - pad + kx * dil
                            if 0 <= ix < w:
                                out[row, oy * wo + ox] = x[c, iy, ix]
    return out_np


def col2im(real[:, ::1] cols, int C, int h, int w, int kh, int kw,
           int stride, int pad, int dil):
    cdef int ho = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    cdef int wo = (w + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out_np = np.zeros((C, h, w), dtype=np.asarray(cols).dtype)
    cdef real[:, :, ::1] out = out_np
    cdef int c, ky, kx, oy, ox, iy, ix, row
    with nogil:
        for c in range(C):
            for ky in range(kh):
                for kx in range(kw):
                    row = (c * kh + ky) * kw + kx
                    for oy in range(ho):
                        iy = oy * stride - pad + ky * dil
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(wo):
                            ix = ox * stride - pad + kx * dil
                            if 0 <= ix < w:
                                out[c, iy, ix] += cols[row, oy * wo + ox]
    return out_np


def pack_cols_cmajor(real[:, :, :, ::1] xs):
    """Repack gathered taps [K,ho,wo,C] into im2col's channel-major
    column layout [C*K, ho*wo] (row c*K + k)."""
    cdef int K = xs.shape[0], ho = xs.shape[1], wo = xs.shape[2], C = xs.shape[3]
    cdef int P = ho * wo
    out_np = np.empty((C * K, P), dtype=np.asarray(xs).dtype)
    cdef real[:, ::1] out = out_np
    cdef real[:, ::1] xs2 = np.asarray(xs).reshape(K, P * C)
    cdef int k, c, p
    with nogil:
        for k in range(K):
            for c in range(C):
                for p in range(P):
                    out[c * K + k, p] = xs2[k, p * C + c]
    return out_np


def unpack_cols_cmajor(real[:, ::1] cols, int K, int ho, int wo):
    """Inverse of pack_cols_cmajor: [C*K, ho*wo] -> [K,ho,wo,C]."""
    cdef int C = cols.shape[0] // K
    cdef int P = ho * wo
    out_np = np.empty((K, ho, wo, C), dtype=np.asarray(cols).dtype)
    cdef real[:, ::1] out = out_np.reshape(K, P * C)
    cdef int k, c, p
    with nogil:
        for k in range(K):
            for c in range(C):
                for p in range(P):
                    out[k, p * C + c] = cols[c * K + k, p]
    return out_np


def pack_cols_kmajor(real[:, :, :, ::1] xs):
    """Repack gathered taps [K,ho,wo,C] into tap-major columns
    [K*C, ho*wo] (row k*C + c)."""
    cdef int K = xs.shape[0], ho = xs.shape[1], wo = xs.shape[2], C = xs.shape[3]
    cdef int P = ho * wo
    out_np = np.empty((K * C, P), dtype=np.asarray(xs).dtype)
    cdef real[:, ::1] out = out_np
    cdef real[:, ::1] xs2 = np.asarray(xs).reshape(K, P * C)
    cdef int k, c, p
    with nogil:
        for k in range(K):
            for c in range(C):
                for p in range(P):
                    out[k * C + c, p] = xs2[k, p * C + c]
    return out_np


def unpack_cols_kmajor(real[:, ::1] cols, int K, int ho, int wo):
    """Inverse of pack_cols_kmajor: [K*C, ho*wo] -> [K,ho,wo,C]."""
    cdef int C = cols.shape[0] // K
    cdef int P = ho * wo
    out_np = np.empty((K, ho, wo, C), dtype=np.asarray(cols).dtype)
    cdef real[:, ::1] out = out_np.reshape(K, P * C)
    cdef int k, c, p
    with nogil:
        for k in range(K):
            for c in range(C):
                for p in range(P):
                    out[k, p * C + c] = cols[k * C + c, p]
    return out_np


def deform_gather(real[:, :, ::1] fmap, real[:, :, :, ::1] coords):
    """Bilinear sampling of a channel-last map [h,w,C] at [K,ho,wo,2]
    (y, x) coordinates; out-of-range taps read zero. Returns [K,ho,wo,C]."""
    cdef int h = fmap.shape[0], w = fmap.shape[1], C = fmap.shape[2]
    cdef int K = coords.shape[0], ho = coords.shape[1], wo = coords.shape[2]
    out_np = np.zeros((K, ho, wo, C), dtype=np.asarray(fmap).dtype)
    cdef real[:, :, :, ::1] out = out_np
    cdef int k, c, oy, ox, y0, x0
    cdef bint v00, v01, v10, v11
    cdef real y, x, wy, wx, w00, w01, w10, w11
    with nogil:
        for k in range(K):
            for oy in range(ho):
                for ox in range(wo):
                    y = coords[k, oy, ox, 0]
                    x = coords[k, oy, ox, 1]
                    y0 = <int> floor(y)
                    x0 = <int> floor(x)
                    wy = y - y0
                    wx = x - x0
                    v00 = 0 <= y0 < h and 0 <= x0 < w
                    v01 = 0 <= y0 < h and 0 <= x0 + 1 < w
                    v10 = 0 <= y0 + 1 < h and 0 <= x0 < w
                    v11 = 0 <= y0 + 1 < h and 0 <= x0 + 1 < w
                    w00 = (1 - wy) * (1 - wx)
                    w01 = (1 - wy) * wx
                    w10 = wy * (1 - wx)
                    w11 = wy * wx
                    if v00 and v01 and v10 and v11:
                        for c in range(C):
                            out[k, oy, ox, c] = (w00 * fmap[y0, x0, c]
                                                 + w01 * fmap[y0, x0 + 1, c]
                                                 + w10 * fmap[y0 + 1, x0, c]
                                                 + w11 * fmap[y0 + 1, x0 + 1, c])
                    else:
                        for c in range(C):
                            out[k, oy, ox, c] = (
                                (w00 * fmap[y0, x0, c] if v00 else 0)
                                + (w01 * fmap[y0, x0 + 1, c] if v01 else 0)
                                + (w10 * fmap[y0 + 1, x0, c] if v10 else 0)
                                + (w11 * fmap[y0 + 1, x0 + 1, c] if v11 else 0))
    return out_np


def pack_cols_cmajor_mod(real[:, :, :, ::1] xs, real[:, ::1] m):
    """pack_cols_cmajor with a per-tap modulation field [K, ho*wo]
    multiplied into the columns during the repack."""
    cdef int K = xs.shape[0], ho = xs.shape[1], wo = xs.shape[2], C = xs.shape[3]
    cdef int P = ho * wo
    out_np = np.empty((C * K, P), dtype=np.asarray(xs).dtype)
    cdef real[:, ::1] out = out_np
    cdef real[:, ::1] xs2 = np.asarray(xs).reshape(K, P * C)
    cdef int k, c, p
    with nogil:
        for k in range(K):
            for c in range(C):
                for p in range(P):
                    out[c * K + k, p] = xs2[k, p * C + c] * m[k, p]
    return out_np


def deform_gather_backward(real[:, :, :, ::1] dout, real[:, :, ::1] fmap,
                           real[:, :, :, ::1] coords):
    """Backward of deform_gather: dout [K,ho,wo,C] -> (dmap [h,w,C],
    dcoords [K,ho,wo,2])."""
    cdef int h = fmap.shape[0], w = fmap.shape[1], C = fmap.shape[2]
    cdef int K = coords.shape[0], ho = coords.shape[1], wo = coords.shape[2]
    dt = np.asarray(fmap).dtype
    dmap_np = np.zeros((h, w, C), dtype=dt)
    dcoords_np = np.zeros((K, ho, wo, 2), dtype=dt)
    cdef real[:, :, ::1] dmap = dmap_np
    cdef real[:, :, :, ::1] dcoords = dcoords_np
    cdef int k, c, oy, ox, y0, x0
    cdef bint v00, v01, v10, v11
    cdef real y, x, wy, wx, g, dy, dx, t00, t01, t10, t11
    with nogil:
        for k in range(K):
            for oy in range(ho):
                for ox in range(wo):
                    y = coords[k, oy, ox, 0]
                    x = coords[k, oy, ox, 1]
                    y0 = <int> floor(y)
                    x0 = <int> floor(x)
                    wy = y - y0
                    wx = x - x0
                    v00 = 0 <= y0 < h and 0 <= x0 < w
                    v01 = 0 <= y0 < h and 0 <= x0 + 1 < w
                    v10 = 0 <= y0 + 1 < h and 0 <= x0 < w
                    v11 = 0 <= y0 + 1 < h and 0 <= x0 + 1 < w
                    dy = 0
                    dx = 0
                    for c in range(C):
                        g = dout[k, oy, ox, c]
                        t00 = fmap[y0, x0, c] if v00 else 0
                        t01 = fmap[y0, x0 + 1, c] if v01 else 0
                        t10 = fmap[y0 + 1, x0, c] if v10 else 0
                        t11 = fmap[y0 + 1, x0 + 1, c] if v11 else 0
                        dy += g * ((1 - wx) * (t10 - t00) + wx * (t11 - t01))
                        dx += g * ((1 - wy) * (t01 - t00) + wy * (t11 - t10))
                        if v00:
                            dmap[y0, x0, c] += g * (1 - wy) * (1 - wx)
                        if v01:
                            dmap[y0, x0 + 1, c] += g * (1 - wy) * wx
                        if v10:
                            dmap[y0 + 1, x0, c] += g * wy * (1 - wx)
                        if v11:
                            dmap[y0 + 1, x0 + 1, c] += g * wy * wx
                    dcoords[k, oy, ox, 0] = dy
                    dcoords[k, oy, ox, 1] = dx
    return dmap_np, dcoords_np
