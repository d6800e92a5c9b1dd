"""The spatially guided convolution operator.

Pipeline per layer: project raw spatial input to a 64-channel guidance
map, generate per-position fractional tap offsets from it, gather the
guidance at the displaced taps, squash a position-wise two-layer MLP of
the gathered vectors into a per-tap sigmoid mask, and apply the masked,
offset-sampled convolution. Backward is fully hand-derived, including
the coordinate gradients through every bilinear tap.
"""

from __future__ import annotations

import numpy as np

from . import backend, ops
from .errors import DimensionError, StateError
from .tensor import ConvGeometry

GUIDE_CHANNELS = 64


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def tap_base_coords(geom: ConvGeometry, ho: int, wo: int, dtype) -> np.ndarray:
    """Input-plane (y, x) coordinates of each undisplaced kernel tap,
    [K,ho,wo,2]."""
    ky = np.arange(geom.k_h)
    kx = np.arange(geom.k_w)
    oy = geom.stride * np.arange(ho) - geom.padding
    ox = geom.stride * np.arange(wo) - geom.padding
    base = np.zeros((geom.k_h, geom.k_w, ho, wo, 2))
    base[..., 0] = oy[None, None, :, None] + (ky * geom.dilation)[:, None, None, None]
    base[..., 1] = ox[None, None, None, :] + (kx * geom.dilation)[None, :, None, None]
    return base.reshape(geom.K, ho, wo, 2).astype(dtype)


def generate_offsets(sp: np.ndarray, eta_w: np.ndarray, eta_b: np.ndarray,
                     geom: ConvGeometry, cols: np.ndarray | None = None):
    """One conv (64 -> 2K channels) mirroring the host geometry, reshaped
    to [K,ho,wo,2] with (dy, dx) pairs in kernel-grid order."""
    if eta_w.shape[0] != 2 * geom.K:
        raise DimensionError(f"offset conv has {eta_w.shape[0]} channels, need {2 * geom.K}")
    raw, cache = ops.conv2d_forward(sp, eta_w, eta_b, geom, cols=cols)
    k2, ho, wo = raw.shape
    offsets = raw.reshape(geom.K, 2, ho, wo).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(offsets), cache


def generate_offsets_backward(cache, d_offsets: np.ndarray):
    K, ho, wo = d_offsets.shape[:3]
    draw = np.ascontiguousarray(d_offsets.transpose(0, 3, 1, 2).reshape(2 * K, ho, wo))
    return ops.conv2d_backward(cache, draw)


def gather_spatial(sp: np.ndarray, geom: ConvGeometry, offsets: np.ndarray):
    """Bilinear-sample ``sp`` [C,h,w] at every displaced tap; [K,C,ho,wo]."""
    K, ho, wo = offsets.shape[:3]
    coords = np.ascontiguousarray(tap_base_coords(geom, ho, wo, sp.dtype) + offsets)
    hwc = np.ascontiguousarray(sp.transpose(1, 2, 0))
    gathered = backend.deform_gather(hwc, coords)
    return np.ascontiguousarray(gathered.transpose(0, 3, 1, 2)), coords


class SConv2d:
    """A single S-Conv layer with its learnable state and forward caches.

    Parameter names are stable for checkpointing: ``w``, (``b``,)
    ``eta.w``, ``eta.b``, ``f.0.w``, ``f.0.b``, ``f.1.w``, ``f.1.b``.
    """

    def __init__(self, c_in: int, c_out: int, geom: ConvGeometry, rng: np.random.Generator,
                 dtype=np.float64, bias: bool = False, f_hidden: int | None = None):
        self.geom = geom
        self.c_in = c_in
        self.c_out = c_out
        K = geom.K
        gk = GUIDE_CHANNELS * K
        if f_hidden is None:
            f_hidden = gk
        self.f_hidden = f_hidden
        p = {}
        p["w"] = he_uniform(rng, (c_out, c_in, geom.k_h, geom.k_w), c_in * K, dtype)
        if bias:
            p["b"] = np.zeros(c_out, dtype=dtype)
        # zero-init: fresh layers start as identity sampling grid + 0.5 mask
        p["eta.w"] = np.zeros((2 * K, GUIDE_CHANNELS, geom.k_h, geom.k_w), dtype=dtype)
        p["eta.b"] = np.zeros(2 * K, dtype=dtype)
        p["f.0.w"] = he_uniform(rng, (f_hidden, gk), gk, dtype)
        p["f.0.b"] = np.zeros(f_hidden, dtype=dtype)
        p["f.1.w"] = np.zeros((K, f_hidden), dtype=dtype)
        p["f.1.b"] = np.zeros(K, dtype=dtype)
        self.params = p
        self.grads = {k: np.zeros_like(v) for k, v in p.items()}
        self.cache = None
        # test/benchmark switches: freeze the geometry path entirely
        self.force_zero_offsets = False
        self.force_unit_mask = False

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def mask(self, s_star_mat: np.ndarray):
        """Position-wise FC -> ReLU -> FC -> sigmoid over [64K, P]."""
        p = self.params
        z1, fc0_cache = ops.fully_connected(s_star_mat, p["f.0.w"], p["f.0.b"])
        a1, relu_cache = ops.relu(z1)
        z2, fc1_cache = ops.fully_connected(a1, p["f.1.w"], p["f.1.b"])
        m, sig_cache = ops.sigmoid(z2)
        return m, (fc0_cache, relu_cache, fc1_cache, sig_cache)

    def mask_backward(self, mcache, dm: np.ndarray):
        fc0_cache, relu_cache, fc1_cache, sig_cache = mcache
        dz2 = ops.sigmoid_backward(sig_cache, dm)["input"]
        g1 = ops.fully_connected_backward(fc1_cache, dz2)
        da1 = ops.relu_backward(relu_cache, g1["input"])["input"]
        g0 = ops.fully_connected_backward(fc0_cache, da1)
        self.grads["f.1.w"] += g1["weight"]
        self.grads["f.1.b"] += g1["bias"]
        self.grads["f.0.w"] += g0["weight"]
        self.grads["f.0.b"] += g0["bias"]
        return g0["input"]

    def forward(self, x: np.ndarray, sp: np.ndarray,
                sp_cols: np.ndarray | None = None) -> np.ndarray:
        if sp.shape[0] != GUIDE_CHANNELS:
            raise DimensionError(f"guidance map has {sp.shape[0]} channels, need {GUIDE_CHANNELS}")
        if sp.shape[1:] != x.shape[1:]:
            raise DimensionError(f"guidance {sp.shape} vs input {x.shape} resolution mismatch")
        g = self.geom
        ho, wo = g.out_size(x.shape[1], x.shape[2])
        P = ho * wo
        K = g.K
        if self.force_zero_offsets:
            offsets = np.zeros((K, ho, wo, 2), dtype=x.dtype)
            eta_cache = None
        else:
            offsets, eta_cache = generate_offsets(sp, self.params["eta.w"],
                                                  self.params["eta.b"], g,
                                                  cols=sp_cols)
        coords = np.ascontiguousarray(tap_base_coords(g, ho, wo, x.dtype) + offsets)
        sp_hwc = np.ascontiguousarray(sp.transpose(1, 2, 0))
        x_hwc = np.ascontiguousarray(x.transpose(1, 2, 0))
        if self.force_unit_mask:
            m_mat, mcache = np.ones((K, P), dtype=x.dtype), None
        else:
            gathered = backend.deform_gather(sp_hwc, coords)  # [K,ho,wo,64]
            s_star_mat = backend.pack_cols_kmajor(gathered)  # [K*64, P]
            m_mat, mcache = self.mask(s_star_mat)
        xs = backend.deform_gather(x_hwc, coords)  # [K,ho,wo,C_in]
        # repack to the im2col layout [C_in*K, P] with the modulation folded
        # into the copy: identical summation order makes the degenerate case
        # bit-equal to conv2d_forward, and the product is a single BLAS matmul
        if self.force_unit_mask:
            mx_cols = backend.pack_cols_cmajor(xs)
        else:
            mx_cols = backend.pack_cols_cmajor_mod(xs, m_mat)
        y = self.params["w"].reshape(self.c_out, -1) @ mx_cols
        if "b" in self.params:
            y = y + self.params["b"][:, None]
        self.cache = (x_hwc, sp_hwc, coords, eta_cache, mcache, m_mat, xs, mx_cols, (ho, wo))
        return np.ascontiguousarray(y.reshape(self.c_out, ho, wo))

    def backward(self, dy: np.ndarray):
        """Returns (dx, d_guidance). Accumulates parameter grads in-place."""
        if self.cache is None:
            raise StateError("sconv backward before forward")
        x_hwc, sp_hwc, coords, eta_cache, mcache, m_mat, xs, mx_cols, (ho, wo) = self.cache
        g = self.geom
        K = g.K
        P = ho * wo
        dy_f = dy.reshape(self.c_out, P)
        w_mat = self.params["w"].reshape(self.c_out, -1)
        self.grads["w"] += (dy_f @ mx_cols.T).reshape(self.params["w"].shape)
        if "b" in self.params:
            self.grads["b"] += dy_f.sum(axis=1)
        dmx = (w_mat.T @ dy_f).reshape(self.c_in, K, P)
        dxs = backend.unpack_cols_cmajor(
            np.ascontiguousarray((dmx * m_mat[None, :, :]).reshape(
                self.c_in * K, P)), K, ho, wo)
        dx_hwc, dcoords_x = backend.deform_gather_backward(dxs, x_hwc, coords)
        dx = np.ascontiguousarray(dx_hwc.transpose(2, 0, 1))
        dsp_hwc = np.zeros_like(sp_hwc)
        dcoords = dcoords_x
        if mcache is not None:
            xs_ckp = backend.pack_cols_cmajor(xs).reshape(self.c_in, K, P)
            dm_mat = (dmx * xs_ckp).sum(axis=0)
            ds_star = self.mask_backward(mcache, dm_mat)
            dgathered = backend.unpack_cols_kmajor(
                np.ascontiguousarray(ds_star), K, ho, wo)
            dsp_val, dcoords_sp = backend.deform_gather_backward(dgathered, sp_hwc, coords)
            dsp_hwc += dsp_val
            dcoords = dcoords + dcoords_sp
        dsp = np.ascontiguousarray(dsp_hwc.transpose(2, 0, 1))
        if eta_cache is not None:
            eg = generate_offsets_backward(eta_cache, dcoords)
            self.grads["eta.w"] += eg["weight"]
            self.grads["eta.b"] += eg["bias"]
            dsp += eg["input"]
        self.cache = None
        return dx, dsp

    def offset_field(self, sp: np.ndarray) -> np.ndarray:
        """Offsets [K,ho,wo,2] for the current parameters (no caching)."""
        if self.force_zero_offsets:
            ho, wo = self.geom.out_size(sp.shape[1], sp.shape[2])
            return np.zeros((self.geom.K, ho, wo, 2), dtype=sp.dtype)
        offsets, _ = generate_offsets(sp, self.params["eta.w"], self.params["eta.b"],
                                      self.geom)
        return offsets


class SpatialProjector:
    """Three 3x3 convolutions (c' -> 64 -> 64 -> 64) with ReLU after each.

    Parameter names: ``phi.{i}.w`` / ``phi.{i}.b`` for i in 0..2.
    """

    def __init__(self, c_in: int, rng: np.random.Generator, dtype=np.float64):
        if c_in not in (1, 3):
            raise DimensionError(f"spatial input must have 1 or 3 channels, got {c_in}")
        self.c_in = c_in
        self.geom = ConvGeometry(3, 3, stride=1, padding=1)
        widths = [(c_in, GUIDE_CHANNELS), (GUIDE_CHANNELS, GUIDE_CHANNELS),
                  (GUIDE_CHANNELS, GUIDE_CHANNELS)]
        p = {}
        for i, (ci, co) in enumerate(widths):
            p[f"phi.{i}.w"] = he_uniform(rng, (co, ci, 3, 3), ci * 9, dtype)
            p[f"phi.{i}.b"] = np.zeros(co, dtype=dtype)
        self.params = p
        self.grads = {k: np.zeros_like(v) for k, v in p.items()}
        self.cache = None

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def forward(self, s: np.ndarray) -> np.ndarray:
        caches = []
        h = s
        for i in range(3):
            h, ccache = ops.conv2d_forward(h, self.params[f"phi.{i}.w"],
                                           self.params[f"phi.{i}.b"], self.geom)
            h, rcache = ops.relu(h)
            caches.append((ccache, rcache))
        self.cache = caches
        return h

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self.cache is None:
            raise StateError("projector backward before forward")
        d = dout
        for i in reversed(range(3)):
            ccache, rcache = self.cache[i]
            d = ops.relu_backward(rcache, d)["input"]
            g = ops.conv2d_backward(ccache, d)
            self.grads[f"phi.{i}.w"] += g["weight"]
            self.grads[f"phi.{i}.b"] += g["bias"]
            d = g["input"]
        self.cache = None
        return d


def sconv_param_count(c_in: int, c_out: int, K: int, f_hidden: int,
                      bias: bool = False) -> dict:
    """Closed-form parameter counts per group for one S-Conv layer."""
    gk = GUIDE_CHANNELS * K
    host = c_out * c_in * K + (c_out if bias else 0)
    eta = GUIDE_CHANNELS * 2 * K * K + 2 * K
    f = (gk * f_hidden + f_hidden) + (f_hidden * K + K)
    return {"host": host, "eta": eta, "f": f, "total": host + eta + f}
