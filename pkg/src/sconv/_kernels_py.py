"""Pure-numpy implementations of the hot kernels.

The compiled extension (``_kernels_cy``) provides the same four entry
points; :mod:`sconv.backend` picks whichever is available at import time.
All kernels are deterministic for fixed inputs.
"""

from __future__ import annotations

import numpy as np

NAME = "pure"

_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, dil: int) -> np.ndarray:
    """Unfold [C,h,w] into [C*kh*kw, ho*wo] patch columns (zero padding)."""
    C, h, w = x.shape
    ho = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    kh_eff = dil * (kh - 1) + 1
    kw_eff = dil * (kw - 1) + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh_eff, kw_eff), axis=(1, 2))
    win = win[:, :: stride, :: stride, :: dil, :: dil][:, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2).reshape(C * kh * kw, ho * wo))


def col2im(cols: np.ndarray, C: int, h: int, w: int, kh: int, kw: int,
           stride: int, pad: int, dil: int) -> np.ndarray:
    """Transpose of :func:`im2col`: scatter-add columns back to [C,h,w]."""
    ho = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    hp, wp = h + 2 * pad, w + 2 * pad
    iy = (stride * np.arange(ho)[None, :] + dil * np.arange(kh)[:, None])  # [kh,ho]
    ix = (stride * np.arange(wo)[None, :] + dil * np.arange(kw)[:, None])  # [kw,wo]
    # linear padded index per (kh,kw,ho,wo)
    lin = (iy[:, None, :, None] * wp + ix[None, :, None, :]).reshape(-1)
    vals = cols.reshape(C, -1).T  # [kh*kw*ho*wo, C]
    acc = np.zeros((hp * wp, C), dtype=cols.dtype)
    np.add.at(acc, lin, vals)
    xp = acc.T.reshape(C, hp, wp)
    return np.ascontiguousarray(xp[:, pad:pad + h, pad:pad + w])


def pack_cols_cmajor(xs: np.ndarray) -> np.ndarray:
    """Repack gathered taps [K,ho,wo,C] into im2col's channel-major
    column layout [C*K, ho*wo] (row c*K + k)."""
    K, ho, wo, C = xs.shape
    return np.ascontiguousarray(
        xs.reshape(K, ho * wo, C).transpose(2, 0, 1)).reshape(C * K, ho * wo)


def unpack_cols_cmajor(cols: np.ndarray, K: int, ho: int, wo: int) -> np.ndarray:
    """Inverse of :func:`pack_cols_cmajor`: [C*K, ho*wo] -> [K,ho,wo,C]."""
    C = cols.shape[0] // K
    return np.ascontiguousarray(
        cols.reshape(C, K, ho, wo).transpose(1, 2, 3, 0))


def pack_cols_kmajor(xs: np.ndarray) -> np.ndarray:
    """Repack gathered taps [K,ho,wo,C] into tap-major columns
    [K*C, ho*wo] (row k*C + c)."""
    K, ho, wo, C = xs.shape
    return np.ascontiguousarray(
        xs.reshape(K, ho * wo, C).transpose(0, 2, 1)).reshape(K * C, ho * wo)


def unpack_cols_kmajor(cols: np.ndarray, K: int, ho: int, wo: int) -> np.ndarray:
    """Inverse of :func:`pack_cols_kmajor`: [K*C, ho*wo] -> [K,ho,wo,C]."""
    C = cols.shape[0] // K
    return np.ascontiguousarray(
        cols.reshape(K, C, ho, wo).transpose(0, 2, 3, 1))


def pack_cols_cmajor_mod(xs: np.ndarray, m: np.ndarray) -> np.ndarray:
    """:func:`pack_cols_cmajor` with a per-tap modulation field [K, ho*wo]
    multiplied into the columns during the repack."""
    K, ho, wo, C = xs.shape
    cols = pack_cols_cmajor(xs)
    cols.reshape(C, K, ho * wo)[...] *= m[None, :, :]
    return cols


def deform_gather(fmap: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Bilinear-sample channel-last ``fmap`` [h,w,C] at ``coords``
    [K,ho,wo,2] (y,x). Taps outside the map read zeros. Returns [K,ho,wo,C].
    """
    h, w, C = fmap.shape
    K, ho, wo = coords.shape[:3]
    y = coords[..., 0]
    x = coords[..., 1]
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    wy = (y - y0).astype(fmap.dtype)
    wx = (x - x0).astype(fmap.dtype)
    out = np.zeros((K, ho, wo, C), dtype=fmap.dtype)
    for cy, cx in _CORNERS:
        yy = y0 + cy
        xx = x0 + cx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        wgt = (wy if cy else 1 - wy) * (wx if cx else 1 - wx)
        wgt = np.where(valid, wgt, fmap.dtype.type(0))
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        out += wgt[..., None] * fmap[yc, xc]
    return out


def deform_gather_backward(dout: np.ndarray, fmap: np.ndarray,
                           coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward of :func:`deform_gather`.

    Returns (dmap [h,w,C], dcoords [K,ho,wo,2]); dcoords holds the
    gradients through the interpolation weights.
    """
    h, w, C = fmap.shape
    K, ho, wo = coords.shape[:3]
    y = coords[..., 0]
    x = coords[..., 1]
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    wy = (y - y0).astype(fmap.dtype)
    wx = (x - x0).astype(fmap.dtype)
    dmap_acc = np.zeros((h * w, C), dtype=fmap.dtype)
    dcoords = np.zeros((K, ho, wo, 2), dtype=fmap.dtype)
    for cy, cx in _CORNERS:
        yy = y0 + cy
        xx = x0 + cx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        wgt_y = wy if cy else 1 - wy
        wgt_x = wx if cx else 1 - wx
        wgt = np.where(valid, wgt_y * wgt_x, fmap.dtype.type(0))
        # value path
        contrib = (wgt[..., None] * dout).reshape(-1, C)
        lin = np.where(valid, yc * w + xc, 0).reshape(-1)
        np.add.at(dmap_acc, lin, np.where(valid.reshape(-1, 1), contrib, 0))
        # coordinate path
        v = np.where(valid[..., None], fmap[yc, xc], fmap.dtype.type(0))
        dv = np.einsum("kijc,kijc->kij", dout, v)
        sy = fmap.dtype.type(1 if cy else -1)
        sx = fmap.dtype.type(1 if cx else -1)
        dcoords[..., 0] += sy * wgt_x * dv
        dcoords[..., 1] += sx * wgt_y * dv
    dmap = dmap_acc.reshape(h, w, C)
    return dmap, dcoords
