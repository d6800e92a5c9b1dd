"""Toy segmentation network built around the spatially guided convolution.

A small residual backbone (4 stages, stride-2 each, output stride 16)
whose designated 3x3 convolutions are replaced by S-Conv according to a
per-stage policy, one shared spatial projector, a deep-supervision head
between stage 3 and stage 4, and a plain-conv decoder. The baseline twin
is the same call with an empty policy.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import backend, ops
from .errors import CheckpointError, ConfigError, DimensionError, StateError
from .sconv import GUIDE_CHANNELS, SConv2d, SpatialProjector, he_uniform, sconv_param_count
from .tensor import ConvGeometry, load_tensor, resolve_dtype, save_tensor

SOURCE_CHANNELS = {"depth": 1, "hha": 3, "coords": 3}


# ---------------------------------------------------------------------------
# basic layers

class Conv2dLayer:
    def __init__(self, c_in, c_out, geom: ConvGeometry, rng, dtype, bias=False):
        self.geom = geom
        p = {"w": he_uniform(rng, (c_out, c_in, geom.k_h, geom.k_w),
                             c_in * geom.K, dtype)}
        if bias:
            p["b"] = np.zeros(c_out, dtype=dtype)
        self.params = p
        self.grads = {k: np.zeros_like(v) for k, v in p.items()}
        self.cache = None

    def forward(self, x):
        y, self.cache = ops.conv2d_forward(x, self.params["w"],
                                           self.params.get("b"), self.geom)
        return y

    def backward(self, dy):
        g = ops.conv2d_backward(self.cache, dy)
        self.cache = None
        self.grads["w"] += g["weight"]
        if "b" in self.params:
            self.grads["b"] += g["bias"]
        return g["input"]


class NormLayer:
    """Per-channel normalization: current-image statistics in train mode,
    running statistics in eval mode. Scale/shift are excluded from weight
    decay by the trainer."""

    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, c, dtype):
        self.params = {"scale": np.ones(c, dtype=dtype), "shift": np.zeros(c, dtype=dtype)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.buffers = {"running_mean": np.zeros(c, dtype=dtype),
                        "running_var": np.ones(c, dtype=dtype)}
        self.cache = None

    def forward(self, x, train: bool):
        if train:
            mu = x.mean(axis=(1, 2))
            var = x.var(axis=(1, 2))
            rb = self.buffers
            rb["running_mean"] += self.MOMENTUM * (mu - rb["running_mean"])
            rb["running_var"] += self.MOMENTUM * (var - rb["running_var"])
        else:
            mu = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.EPS)
        xhat = (x - mu[:, None, None]) * inv[:, None, None]
        y = self.params["scale"][:, None, None] * xhat + self.params["shift"][:, None, None]
        self.cache = (xhat, inv, train)
        return y

    def backward(self, dy):
        xhat, inv, train = self.cache
        self.cache = None
        self.grads["scale"] += (dy * xhat).sum(axis=(1, 2))
        self.grads["shift"] += dy.sum(axis=(1, 2))
        gs = (self.params["scale"] * inv)[:, None, None]
        if not train:
            return gs * dy
        n = dy.shape[1] * dy.shape[2]
        mean_dy = dy.mean(axis=(1, 2), keepdims=True)
        mean_dyx = (dy * xhat).mean(axis=(1, 2), keepdims=True)
        return gs * (dy - mean_dy - xhat * mean_dyx)


# ---------------------------------------------------------------------------
# configuration

DEFAULT_WIDTHS = (160, 320, 384, 672)


@dataclass
class NetworkConfig:
    widths: tuple = DEFAULT_WIDTHS
    blocks_per_stage: int = 2
    num_classes: int = 6
    source_kind: str = "depth"
    sconv_policy: dict | None = None  # stage index (0-based) -> conv indices
    use_deep_supervision: bool = True
    f_hidden: int = 8
    decoder_width: int | None = None
    precision: str = "f64"
    seed: int = 0

    def resolved_policy(self) -> dict:
        """Default: first plus last two 3x3 convs of every stage."""
        nb = self.blocks_per_stage
        if self.sconv_policy is not None:
            for s, idxs in self.sconv_policy.items():
                if int(s) not in range(4):
                    raise ConfigError(f"policy stage {s} out of range")
                for i in idxs:
                    if i not in range(2 * nb):
                        raise ConfigError(f"policy conv index {i} out of range for "
                                          f"{nb} blocks per stage")
            return {int(s): list(v) for s, v in self.sconv_policy.items()}
        idxs = sorted({0, 2 * nb - 2, 2 * nb - 1})
        return {s: list(idxs) for s in range(4)}

    def spatial_channels(self) -> int:
        if self.source_kind not in SOURCE_CHANNELS:
            raise ConfigError(f"unknown spatial source {self.source_kind!r}")
        return SOURCE_CHANNELS[self.source_kind]


# ---------------------------------------------------------------------------
# residual block

class ResidualBlock:
    """conv3x3-norm-relu-conv3x3-norm with identity/projection shortcut."""

    def __init__(self, c_in, c_out, stride, sconv_idxs, rng, dtype, f_hidden):
        g1 = ConvGeometry(3, 3, stride=stride, padding=1)
        g2 = ConvGeometry(3, 3, stride=1, padding=1)

        def make(idx, ci, co, geom):
            if idx in sconv_idxs:
                return SConv2d(ci, co, geom, rng, dtype=dtype, f_hidden=f_hidden)
            return Conv2dLayer(ci, co, geom, rng, dtype)

        self.conv1 = make(0, c_in, c_out, g1)
        self.norm1 = NormLayer(c_out, dtype)
        self.conv2 = make(1, c_out, c_out, g2)
        self.norm2 = NormLayer(c_out, dtype)
        self.proj = None
        self.proj_norm = None
        if stride != 1 or c_in != c_out:
            self.proj = Conv2dLayer(c_in, c_out, ConvGeometry(1, 1, stride=stride), rng, dtype)
            self.proj_norm = NormLayer(c_out, dtype)
        self.cache = None

    def sconvs(self):
        return [(i, c) for i, c in enumerate((self.conv1, self.conv2))
                if isinstance(c, SConv2d)]

    def _apply(self, conv, x, sp_lookup, sp_cols_lookup=None):
        if isinstance(conv, SConv2d):
            sp = sp_lookup(x.shape[1], x.shape[2])
            cols = None
            if sp_cols_lookup is not None:
                cols = sp_cols_lookup(sp, conv.geom)
            return conv.forward(x, sp, sp_cols=cols)
        return conv.forward(x)

    def forward(self, x, train, sp_lookup, sp_cols_lookup=None):
        h = self._apply(self.conv1, x, sp_lookup, sp_cols_lookup)
        h = self.norm1.forward(h, train)
        h, r1 = ops.relu(h)
        h = self._apply(self.conv2, h, sp_lookup, sp_cols_lookup)
        h = self.norm2.forward(h, train)
        if self.proj is not None:
            sc = self.proj_norm.forward(self.proj.forward(x), train)
        else:
            sc = x
        out = h + sc
        out, r2 = ops.relu(out)
        self.cache = (r1, r2)
        return out

    def backward(self, dy, sp_accum):
        r1, r2 = self.cache
        self.cache = None
        d = ops.relu_backward(r2, dy)["input"]
        if self.proj is not None:
            dsc = self.proj.backward(self.proj_norm.backward(d))
        else:
            dsc = d
        dh = self.norm2.backward(d)
        dh = self._unapply(self.conv2, dh, sp_accum)
        dh = ops.relu_backward(r1, dh)["input"]
        dh = self.norm1.backward(dh)
        dh = self._unapply(self.conv1, dh, sp_accum)
        return dh + dsc

    def _unapply(self, conv, dy, sp_accum):
        if isinstance(conv, SConv2d):
            dx, dsp = conv.backward(dy)
            sp_accum(dsp)
            return dx
        return conv.backward(dy)


# ---------------------------------------------------------------------------
# full model

class SegModel:
    def __init__(self, config: NetworkConfig):
        self.config = config
        dtype = resolve_dtype(config.precision)
        self.dtype = dtype
        rng = np.random.default_rng(config.seed)
        policy = config.resolved_policy()
        w = list(config.widths)
        nb = config.blocks_per_stage

        self.stem = Conv2dLayer(3, w[0], ConvGeometry(3, 3, stride=1, padding=1), rng, dtype)
        self.stem_norm = NormLayer(w[0], dtype)

        self.stages = []
        c_in = w[0]
        for s in range(4):
            blocks = []
            for b in range(nb):
                stride = 2 if b == 0 else 1
                block_sconvs = [i - 2 * b for i in policy.get(s, [])
                                if i in (2 * b, 2 * b + 1)]
                blocks.append(ResidualBlock(c_in, w[s], stride, block_sconvs,
                                            rng, dtype, config.f_hidden))
                c_in = w[s]
            self.stages.append(blocks)

        dec_w = config.decoder_width or w[3]
        g3 = ConvGeometry(3, 3, stride=1, padding=1)
        self.dec1 = Conv2dLayer(w[3], dec_w, g3, rng, dtype)
        self.dec2 = Conv2dLayer(dec_w, dec_w, g3, rng, dtype)
        self.classifier = Conv2dLayer(dec_w, config.num_classes,
                                      ConvGeometry(1, 1), rng, dtype, bias=True)

        self.aux_conv = None
        if config.use_deep_supervision:
            self.aux_conv = Conv2dLayer(w[2], w[2], g3, rng, dtype)
            self.aux_classifier = Conv2dLayer(w[2], config.num_classes,
                                              ConvGeometry(1, 1), rng, dtype, bias=True)

        self.has_sconv = any(True for _ in self.iter_sconvs())
        self.phi = None
        if self.has_sconv:
            self.phi = SpatialProjector(config.spatial_channels(), rng, dtype)
        self._fw = None

    # -- registry ----------------------------------------------------------

    def iter_layers(self):
        yield "stem", self.stem
        yield "stem_norm", self.stem_norm
        for s, blocks in enumerate(self.stages):
            for b, blk in enumerate(blocks):
                base = f"stage{s + 1}.block{b}"
                yield f"{base}.conv0", blk.conv1
                yield f"{base}.norm0", blk.norm1
                yield f"{base}.conv1", blk.conv2
                yield f"{base}.norm1", blk.norm2
                if blk.proj is not None:
                    yield f"{base}.proj", blk.proj
                    yield f"{base}.proj_norm", blk.proj_norm
        yield "dec1", self.dec1
        yield "dec2", self.dec2
        yield "classifier", self.classifier
        if self.aux_conv is not None:
            yield "aux_conv", self.aux_conv
            yield "aux_classifier", self.aux_classifier
        if self.phi is not None:
            yield "phi", self.phi

    def iter_sconvs(self):
        for s, blocks in enumerate(self.stages):
            for b, blk in enumerate(blocks):
                for i, conv in blk.sconvs():
                    yield f"stage{s + 1}.block{b}.conv{i}", conv

    def named_params(self):
        """Yields (name, value, grad, decay)."""
        for lname, layer in self.iter_layers():
            is_norm = isinstance(layer, NormLayer)
            for pname, v in layer.params.items():
                yield f"{lname}.{pname}", v, layer.grads[pname], not is_norm

    def named_buffers(self):
        for lname, layer in self.iter_layers():
            for bname, v in getattr(layer, "buffers", {}).items():
                yield f"{lname}.{bname}", v

    def zero_grads(self):
        for _, layer in self.iter_layers():
            for g in layer.grads.values():
                g[:] = 0

    def set_degenerate(self, flag: bool):
        """Force every S-Conv to zero offsets and unit mask."""
        for _, conv in self.iter_sconvs():
            conv.force_zero_offsets = flag
            conv.force_unit_mask = flag

    # -- forward / backward ------------------------------------------------

    def forward(self, image: np.ndarray, spatial: np.ndarray | None, train: bool = False):
        if image.shape[0] != 3:
            raise DimensionError(f"expected RGB [3,h,w], got {image.shape}")
        image = np.ascontiguousarray(image, dtype=self.dtype)
        h, w = image.shape[1:]
        sp_full = None
        resized = {}
        if self.has_sconv:
            if spatial is None:
                raise DimensionError("model has S-Conv layers but no spatial input")
            spatial = np.ascontiguousarray(spatial, dtype=self.dtype)
            if spatial.shape[1:] != (h, w):
                raise DimensionError(
                    f"spatial {spatial.shape} vs image {image.shape} resolution mismatch")
            sp_full = self.phi.forward(spatial)

        def sp_lookup(hh, ww):
            key = (hh, ww)
            if key not in resized:
                out, rc = ops.bilinear_resize(sp_full, hh, ww)
                resized[key] = [out, rc, np.zeros_like(out)]
            return resized[key][0]

        # S-Conv layers sharing a guide map and conv geometry also share
        # the offset conv's unfolded input; compute it once per forward
        eta_cols = {}

        def sp_cols_lookup(sp_map, geom):
            key = (sp_map.shape[1], sp_map.shape[2], geom.k_h, geom.k_w,
                   geom.stride, geom.padding, geom.dilation)
            if key not in eta_cols:
                eta_cols[key] = backend.im2col(
                    sp_map, geom.k_h, geom.k_w, geom.stride, geom.padding,
                    geom.dilation)
            return eta_cols[key]

        x = self.stem.forward(image)
        x = self.stem_norm.forward(x, train)
        x, stem_relu = ops.relu(x)
        feats = []
        for s, blocks in enumerate(self.stages):
            for blk in blocks:
                x = blk.forward(x, train, sp_lookup, sp_cols_lookup)
            feats.append(x)
        stage3_out = feats[2]

        d1 = self.dec1.forward(x)
        d1, dr1 = ops.relu(d1)
        d2 = self.dec2.forward(d1)
        d2, dr2 = ops.relu(d2)
        logits_small = self.classifier.forward(d2)
        logits, up_cache = ops.bilinear_resize(logits_small, h, w)

        aux_logits = None
        aux_cache = None
        if train and self.aux_conv is not None:
            a = self.aux_conv.forward(stage3_out)
            a, ar = ops.relu(a)
            aux_small = self.aux_classifier.forward(a)
            aux_logits, aux_up = ops.bilinear_resize(aux_small, h, w)
            aux_cache = (ar, aux_up)

        self._fw = {
            "train": train,
            "stem_relu": stem_relu,
            "dec_relus": (dr1, dr2),
            "up_cache": up_cache,
            "aux_cache": aux_cache,
            "resized": resized,
        }
        return logits, aux_logits

    def backward(self, dlogits: np.ndarray, daux: np.ndarray | None = None):
        if self._fw is None:
            raise StateError("backward before forward")
        fw = self._fw
        self._fw = None
        resized = fw["resized"]

        d_small = ops.bilinear_resize_backward(fw["up_cache"], dlogits)["map"]
        d = self.classifier.backward(d_small)
        dr1, dr2 = fw["dec_relus"]
        d = ops.relu_backward(dr2, d)["input"]
        d = self.dec2.backward(d)
        d = ops.relu_backward(dr1, d)["input"]
        d = self.dec1.backward(d)

        daux_stage3 = None
        if daux is not None and fw["aux_cache"] is not None:
            ar, aux_up = fw["aux_cache"]
            da = ops.bilinear_resize_backward(aux_up, daux)["map"]
            da = self.aux_classifier.backward(da)
            da = ops.relu_backward(ar, da)["input"]
            daux_stage3 = self.aux_conv.backward(da)

        for s in reversed(range(4)):
            if s == 2 and daux_stage3 is not None:
                d = d + daux_stage3
            for blk in reversed(self.stages[s]):
                def accum(dsp, _blk_d=None):
                    hw = dsp.shape[1:]
                    resized[hw][2] += dsp
                d = blk.backward(d, accum)
        d = ops.relu_backward(fw["stem_relu"], d)["input"]
        d = self.stem_norm.backward(d)
        self.stem.backward(d)

        if self.phi is not None:
            dsp_full = None
            for (hh, ww), (_, rc, acc) in resized.items():
                g = ops.bilinear_resize_backward(rc, acc)["map"]
                dsp_full = g if dsp_full is None else dsp_full + g
            if dsp_full is not None:
                self.phi.backward(dsp_full)

    # -- introspection -----------------------------------------------------

    def count_params(self) -> dict:
        """Breakdown {backbone, sconv_extra, decoder, total}; sconv_extra
        covers the offset/mask generators plus the shared projector."""
        sconv_extra = 0
        for _, conv in self.iter_sconvs():
            c = sconv_param_count(conv.c_in, conv.c_out, conv.geom.K, conv.f_hidden,
                                  bias="b" in conv.params)
            sconv_extra += c["eta"] + c["f"]
            registry = sum(v.size for k, v in conv.params.items()
                           if k not in ("w", "b"))
            if registry != c["eta"] + c["f"]:
                raise StateError("closed-form S-Conv count disagrees with registry")
        if self.phi is not None:
            sconv_extra += self.phi.param_count()
        decoder_names = ("dec1", "dec2", "classifier", "aux_conv", "aux_classifier")
        decoder = 0
        total = 0
        for lname, layer in self.iter_layers():
            n = sum(v.size for v in layer.params.values())
            total += n
            if lname in decoder_names:
                decoder += n
        backbone = total - decoder - sconv_extra
        return {
            "backbone": backbone,
            "sconv_extra": sconv_extra,
            "decoder": decoder,
            "total": total,
            "overhead_pct": 100.0 * sconv_extra / max(total - sconv_extra, 1),
        }

    def receptive_field_maps(self, image: np.ndarray, spatial: np.ndarray):
        """Per S-Conv layer, the per-position summed offset norms scaled
        to [0,255]. Returns [(name, float map [h_l,w_l])]."""
        maps = []
        if not self.has_sconv:
            return maps
        sp_full = self.phi.forward(np.ascontiguousarray(spatial, dtype=self.dtype))
        shapes = self._sconv_input_shapes(image.shape[1], image.shape[2])
        for name, conv in self.iter_sconvs():
            hh, ww = shapes[name]
            sp, _ = ops.bilinear_resize(sp_full, hh, ww)
            offsets = conv.offset_field(sp)
            norms = np.sqrt((offsets ** 2).sum(axis=-1)).sum(axis=0)
            peak = norms.max()
            scaled = np.clip(norms * (255.0 / peak), 0.0, 255.0) if peak > 0 else norms
            maps.append((name, scaled))
        return maps

    def _sconv_input_shapes(self, h, w):
        shapes = {}
        hh, ww = h, w
        for s, blocks in enumerate(self.stages):
            for b, blk in enumerate(blocks):
                in_hw = (hh, ww)
                g = blk.conv1.geom
                out_hw = g.out_size(hh, ww)
                if isinstance(blk.conv1, SConv2d):
                    shapes[f"stage{s + 1}.block{b}.conv0"] = in_hw
                if isinstance(blk.conv2, SConv2d):
                    shapes[f"stage{s + 1}.block{b}.conv1"] = out_hw
                hh, ww = out_hw
        return shapes

    # -- checkpointing -----------------------------------------------------

    def save_checkpoint(self, path):
        os.makedirs(path, exist_ok=True)
        manifest = {"format": "sconv-checkpoint-v1", "config": _config_dict(self.config),
                    "tensors": []}
        entries = [(n, v) for n, v, _, _ in self.named_params()]
        entries += list(self.named_buffers())
        for name, v in entries:
            fname = name.replace("/", "_") + ".sct"
            save_tensor(os.path.join(path, fname), v)
            manifest["tensors"].append({"name": name, "shape": list(v.shape),
                                        "dtype": str(v.dtype), "file": fname})
        with open(os.path.join(path, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")

    def load_checkpoint(self, path):
        mpath = os.path.join(path, "manifest.json")
        if not os.path.exists(mpath):
            raise CheckpointError(f"{path}: no manifest.json")
        manifest = json.load(open(mpath))
        store = {e["name"]: e for e in manifest["tensors"]}
        targets = {n: v for n, v, _, _ in self.named_params()}
        targets.update(dict(self.named_buffers()))
        for name, v in targets.items():
            if name not in store:
                raise CheckpointError(f"checkpoint missing tensor {name}")
            t = load_tensor(os.path.join(path, store[name]["file"]))
            if tuple(t.shape) != tuple(v.shape):
                raise CheckpointError(
                    f"{name}: checkpoint shape {t.shape} vs model {v.shape}")
            v[:] = t.astype(v.dtype)

    def copy_host_weights_to(self, other: "SegModel"):
        """Copy every shared parameter/buffer (by name) into ``other``,
        skipping the geometry-path extras the twin does not have."""
        src = {n: v for n, v, _, _ in self.named_params()}
        src.update(dict(self.named_buffers()))
        for name, v, _, _ in other.named_params():
            if name in src:
                v[:] = src[name].astype(v.dtype)
        for name, v in other.named_buffers():
            if name in src:
                v[:] = src[name].astype(v.dtype)


def _config_dict(cfg: NetworkConfig) -> dict:
    d = dict(cfg.__dict__)
    d["widths"] = list(cfg.widths)
    return d


def config_from_dict(d: dict) -> NetworkConfig:
    d = dict(d)
    if "widths" in d:
        d["widths"] = tuple(d["widths"])
    if d.get("sconv_policy"):
        d["sconv_policy"] = {int(k): list(v) for k, v in d["sconv_policy"].items()}
    return NetworkConfig(**d)


def build(config: NetworkConfig) -> SegModel:
    return SegModel(config)


def build_baseline_twin(config: NetworkConfig) -> SegModel:
    import dataclasses
    return SegModel(dataclasses.replace(config, sconv_policy={}))
