"""Depth-map geometry encodings: hole filling, pinhole back-projection,
and a self-contained simplified HHA (disparity, height above the lowest
scene point, angle between surface normal and gravity).

The HHA here is an approximation: gravity defaults to the camera -y axis
and the ground is taken as the lowest back-projected point, instead of
the iterative gravity alignment of the original recipe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError


@dataclass
class DepthMap:
    """Depth in meters, [1,h,w], plus a validity mask for sensor holes."""

    values: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_array(cls, z: np.ndarray) -> "DepthMap":
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 2:
            z = z[None]
        valid = np.isfinite(z[0]) & (z[0] > 0)
        vals = np.where(valid[None], z, 0.0)
        return cls(vals, valid)

    @property
    def hw(self):
        return self.values.shape[1], self.values.shape[2]


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DataError("focal lengths must be positive")

    @classmethod
    def load(cls, path) -> "CameraIntrinsics":
        vals = [float(t) for t in open(path).read().split()]
        if len(vals) != 4:
            raise DataError(f"{path}: expected 4 intrinsics values, got {len(vals)}")
        return cls(*vals)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"{self.fx} {self.fy} {self.cx} {self.cy}\n")


def sanitize_depth(raw: DepthMap) -> DepthMap:
    """Fill holes with the nearest valid pixel's depth. Idempotent."""
    if not raw.valid.any():
        raise DataError("depth map has no valid pixels")
    if raw.valid.all():
        return DepthMap(raw.values.copy(), raw.valid.copy())
    _, (iy, ix) = ndimage.distance_transform_edt(~raw.valid, return_indices=True)
    filled = raw.values[0][iy, ix]
    return DepthMap(filled[None].copy(), np.ones_like(raw.valid))


def depth_to_coords(d: DepthMap, K: CameraIntrinsics) -> np.ndarray:
    """Pinhole back-projection to camera-frame [3,h,w] (X right, Y down, Z forward)."""
    z = d.values[0]
    if np.any(z <= 0):
        raise DataError("non-positive depth; sanitize holes first")
    h, w = z.shape
    u = np.arange(w)[None, :]
    v = np.arange(h)[:, None]
    x = (u - K.cx) * z / K.fx
    y = (v - K.cy) * z / K.fy
    return np.stack([x, y, np.broadcast_to(z, (h, w))]).astype(np.float64)


def surface_normals(coords: np.ndarray) -> np.ndarray:
    """Per-pixel unit normals [3,h,w] from central-difference cross products.

    Border pixels replicate the nearest interior normal; normals are
    oriented to face the camera (negative Z component).
    """
    P = coords
    du = (P[:, :, 2:] - P[:, :, :-2])[:, 1:-1]  # d/d(u), interior
    dv = (P[:, 2:, :] - P[:, :-2, :])[:, :, 1:-1]
    n = np.cross(du.transpose(1, 2, 0), dv.transpose(1, 2, 0)).transpose(2, 0, 1)
    norm = np.sqrt((n * n).sum(axis=0, keepdims=True))
    n = n / np.maximum(norm, 1e-12)
    flip = n[2] > 0
    n[:, flip] *= -1
    full = np.pad(n, ((0, 0), (1, 1), (1, 1)), mode="edge")
    return full


def depth_to_hha(d: DepthMap, K: CameraIntrinsics,
                 gravity=(0.0, -1.0, 0.0)) -> np.ndarray:
    """Simplified HHA encoding, each channel min-max normalized to [0,1].

    Channels: disparity 1/z; height of the back-projected point above the
    lowest scene point along -gravity; angle (radians) between surface
    normal and gravity.
    """
    g = np.asarray(gravity, dtype=np.float64)
    g = g / np.linalg.norm(g)
    coords = depth_to_coords(d, K)
    z = d.values[0]
    disparity = 1.0 / z
    height = -np.einsum("c,chw->hw", g, coords)
    height = height - height.min()
    n = surface_normals(coords)
    cosang = np.clip(np.einsum("c,chw->hw", g, n), -1.0, 1.0)
    angle = np.arccos(cosang)
    out = np.stack([disparity, height, angle])
    lo = out.min(axis=(1, 2), keepdims=True)
    hi = out.max(axis=(1, 2), keepdims=True)
    return (out - lo) / np.maximum(hi - lo, 1e-12)


def normalize_spatial(s: np.ndarray, eps: float = 1e-8):
    """Per-channel zero-mean unit-variance over the image.

    Returns (normalized, stats) where stats = (mean[c], std[c]) invert
    the transform.
    """
    mean = s.mean(axis=(1, 2), keepdims=True)
    std = np.sqrt(s.var(axis=(1, 2), keepdims=True) + eps)
    return (s - mean) / std, (mean[:, 0, 0], std[:, 0, 0])


def encode_spatial(depth: DepthMap, K: CameraIntrinsics, source_kind: str,
                   normalize: bool = True) -> np.ndarray:
    """Raw spatial input for the network: depth (1ch), coords or hha (3ch)."""
    clean = sanitize_depth(depth)
    if source_kind == "depth":
        s = clean.values.copy()
    elif source_kind == "coords":
        s = depth_to_coords(clean, K)
    elif source_kind == "hha":
        s = depth_to_hha(clean, K)
    else:
        raise DataError(f"unknown spatial source {source_kind!r}")
    if normalize:
        s, _ = normalize_spatial(s)
    return s
