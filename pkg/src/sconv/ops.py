"""Primitive differentiable operations.

Every forward returns ``(output, cache)``; the matching backward consumes
the cache and a gradient of the output and returns gradients as a dict
keyed by argument name. All gradients are hand-derived and validated
against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import backend
from .errors import DataError, DimensionError, StateError
from .tensor import ConvGeometry, check_finite


# ---------------------------------------------------------------------------
# convolution

@dataclass
class Conv2dCache:
    x: np.ndarray
    cols: np.ndarray
    weight: np.ndarray
    has_bias: bool
    geom: ConvGeometry
    out_hw: tuple


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias, geom: ConvGeometry,
                   cols: np.ndarray | None = None):
    """Y(p) = sum_i W_i . X(p + d_i) with zero padding outside the map.

    x: [C_in,h,w], weight: [C_out,C_in,k_h,k_w], bias: [C_out] or None.
    ``cols`` may carry a precomputed im2col of ``x`` under ``geom`` so
    several convolutions over the same input can share one unfold.
    """
    c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    if c_in_w != c_in or kh != geom.k_h or kw != geom.k_w:
        raise DimensionError(
            f"weight {weight.shape} incompatible with input {x.shape} / {geom}")
    check_finite(x, "conv2d input")
    ho, wo = geom.out_size(h, w)
    if cols is None:
        cols = backend.im2col(x, kh, kw, geom.stride, geom.padding, geom.dilation)
    y = (weight.reshape(c_out, -1) @ cols).reshape(c_out, ho, wo)
    if bias is not None:
        y += bias[:, None, None]
    return y, Conv2dCache(x, cols, weight, bias is not None, geom, (ho, wo))


def conv2d_backward(cache: Conv2dCache, dy: np.ndarray):
    if cache is None:
        raise StateError("conv2d_backward called without a forward cache")
    c_out, c_in, kh, kw = cache.weight.shape
    g = cache.geom
    dy_mat = dy.reshape(c_out, -1)
    dw = (dy_mat @ cache.cols.T).reshape(cache.weight.shape)
    dcols = cache.weight.reshape(c_out, -1).T @ dy_mat
    dx = backend.col2im(np.ascontiguousarray(dcols), c_in, cache.x.shape[1],
                        cache.x.shape[2], kh, kw, g.stride, g.padding, g.dilation)
    grads = {"input": dx, "weight": dw}
    if cache.has_bias:
        grads["bias"] = dy.sum(axis=(1, 2))
    return grads


# ---------------------------------------------------------------------------
# fully connected

def fully_connected(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Affine map. x may be [N] or [N,P] (P independent columns)."""
    if weight.shape[1] != x.shape[0]:
        raise DimensionError(f"fc weight {weight.shape} vs input {x.shape}")
    y = weight @ x
    y += bias if x.ndim == 1 else bias[:, None]
    return y, (x, weight)


def fully_connected_backward(cache, dy: np.ndarray):
    x, weight = cache
    if x.ndim == 1:
        return {"input": weight.T @ dy, "weight": np.outer(dy, x), "bias": dy.copy()}
    return {"input": weight.T @ dy, "weight": dy @ x.T, "bias": dy.sum(axis=1)}


# ---------------------------------------------------------------------------
# activations

def relu(x: np.ndarray):
    return np.maximum(x, 0), x


def relu_backward(cache, dy: np.ndarray):
    # relu'(0) = 0 by convention
    return {"input": np.where(cache > 0, dy, 0)}


def sigmoid(x: np.ndarray):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(cache, dy: np.ndarray):
    return {"input": dy * cache * (1 - cache)}


def activation(kind: str, x: np.ndarray):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise DataError(f"unknown activation {kind!r}")


def activation_backward(kind: str, cache, dy: np.ndarray):
    if kind == "relu":
        return relu_backward(cache, dy)
    if kind == "sigmoid":
        return sigmoid_backward(cache, dy)
    raise DataError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# bilinear sampling / resize

def bilinear_sample(fmap: np.ndarray, x: float, y: float):
    """Sample [C,h,w] at fractional (x, y) = (column, row).

    Taps outside the map contribute zero. Returns ([C], cache).
    """
    coords = np.array([[[[y, x]]]], dtype=fmap.dtype)
    hwc = np.ascontiguousarray(fmap.transpose(1, 2, 0))
    out = backend.deform_gather(hwc, coords)
    return out[0, 0, 0], (hwc, coords)


def bilinear_sample_backward(cache, dy: np.ndarray):
    hwc, coords = cache
    dout = np.ascontiguousarray(dy.reshape(1, 1, 1, -1).astype(hwc.dtype))
    dmap, dcoords = backend.deform_gather_backward(dout, hwc, coords)
    return {"map": np.ascontiguousarray(dmap.transpose(2, 0, 1)),
            "y": float(dcoords[0, 0, 0, 0]), "x": float(dcoords[0, 0, 0, 1])}


@lru_cache(maxsize=256)
def _resize_matrix(src: int, dst: int, dtype_str: str) -> np.ndarray:
    """[dst,src] interpolation matrix, align-corners-false, edge clamped."""
    m = np.zeros((dst, src), dtype=np.dtype(dtype_str))
    scale = src / dst
    for i in range(dst):
        s = (i + 0.5) * scale - 0.5
        s0 = int(np.floor(s))
        t = s - s0
        m[i, min(max(s0, 0), src - 1)] += 1 - t
        m[i, min(max(s0 + 1, 0), src - 1)] += t
    return m


def bilinear_resize(fmap: np.ndarray, h2: int, w2: int):
    """Channelwise bilinear resize of [C,h,w] to [C,h2,w2]."""
    if h2 < 1 or w2 < 1:
        raise DimensionError(f"invalid resize target {h2}x{w2}")
    _, h, w = fmap.shape
    if (h2, w2) == (h, w):
        return fmap.copy(), (h, w)
    my = _resize_matrix(h, h2, fmap.dtype.str)
    mx = _resize_matrix(w, w2, fmap.dtype.str)
    out = np.einsum("ij,cjk,lk->cil", my, fmap, mx, optimize=True)
    return np.ascontiguousarray(out), (h, w)


def bilinear_resize_backward(cache, dy: np.ndarray):
    h, w = cache
    _, h2, w2 = dy.shape
    if (h2, w2) == (h, w):
        return {"map": dy.copy()}
    my = _resize_matrix(h, h2, dy.dtype.str)
    mx = _resize_matrix(w, w2, dy.dtype.str)
    dmap = np.einsum("ij,cik,kl->cjl", my, dy, mx, optimize=True)
    return {"map": np.ascontiguousarray(dmap)}


# ---------------------------------------------------------------------------
# loss

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray, ignore_label: int,
                          class_weights=None):
    """Weighted cross entropy averaged over non-ignored pixels.

    Returns (loss, grad_logits, meta); meta["all_ignored"] flags an empty
    average (loss and gradient are then exactly zero).
    """
    p_c, h, w = logits.shape
    if labels.shape != (h, w):
        raise DimensionError(f"labels {labels.shape} vs logits {logits.shape}")
    valid = labels != ignore_label
    lab = np.where(valid, labels, 0)
    if lab.min() < 0 or lab.max() >= p_c:
        raise DataError("label id outside [0, num_classes)")
    shifted = logits - logits.max(axis=0, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    logp = shifted - logz
    n = int(valid.sum())
    meta = {"all_ignored": n == 0, "n_pixels": n}
    if n == 0:
        return 0.0, np.zeros_like(logits), meta
    wmap = np.ones((h, w), dtype=logits.dtype)
    if class_weights is not None:
        wmap = class_weights[lab].astype(logits.dtype)
    wmap = np.where(valid, wmap, 0)
    picked = np.take_along_axis(logp, lab[None], axis=0)[0]
    loss = float(-(wmap * picked).sum() / n)
    soft = np.exp(logp)
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, lab[None], 1.0, axis=0)
    grad = wmap[None] * (soft - onehot) / n
    return loss, grad.astype(logits.dtype), meta
