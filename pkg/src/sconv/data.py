"""Dataset manifests, PNG sample loading, and a synthetic RGBD scene
generator whose class pairs share RGB texture and differ only in depth
structure, so geometry is the only cue separating them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import distance_transform_edt

from .errors import DataError, GenerationError
from .geometry import CameraIntrinsics, DepthMap

IGNORE_LABEL = 255


# ---------------------------------------------------------------------------
# manifest

@dataclass
class DatasetManifest:
    root: str
    entries: list  # of {"rgb": path, "depth": path, "label": path}
    split: str
    num_classes: int
    ignore_label: int = IGNORE_LABEL
    intrinsics_path: str = "intrinsics.txt"
    _intrinsics: CameraIntrinsics | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.entries)

    def intrinsics(self) -> CameraIntrinsics:
        if self._intrinsics is None:
            self._intrinsics = CameraIntrinsics.load(
                os.path.join(self.root, self.intrinsics_path))
        return self._intrinsics

    @classmethod
    def load(cls, root: str, split: str) -> "DatasetManifest":
        path = os.path.join(root, split, "manifest.txt")
        if not os.path.exists(path):
            raise DataError(f"no manifest at {path}")
        with open(path) as fh:
            header = fh.readline().split()
            kv = dict(tok.split("=", 1) for tok in header)
            entries = []
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}: malformed entry {line!r}")
                entries.append({"rgb": parts[0], "depth": parts[1], "label": parts[2]})
        m = cls(root=os.path.join(root, split), entries=entries, split=split,
                num_classes=int(kv["classes"]), ignore_label=int(kv["ignore"]),
                intrinsics_path=kv["intrinsics"])
        for e in m.entries:
            for k in ("rgb", "depth", "label"):
                if not os.path.exists(os.path.join(m.root, e[k])):
                    raise DataError(f"manifest references missing file {e[k]}")
        return m

    def save(self):
        path = os.path.join(self.root, "manifest.txt")
        with open(path, "w") as fh:
            fh.write(f"classes={self.num_classes} ignore={self.ignore_label} "
                     f"intrinsics={self.intrinsics_path}\n")
            for e in sorted(self.entries, key=lambda e: e["rgb"]):
                fh.write(f"{e['rgb']}\t{e['depth']}\t{e['label']}\n")

    def load_sample(self, index: int) -> dict:
        e = self.entries[index]
        rgb_path = os.path.join(self.root, e["rgb"])
        try:
            rgb = np.asarray(Image.open(rgb_path).convert("RGB"), dtype=np.float64)
            depth_raw = np.asarray(Image.open(os.path.join(self.root, e["depth"])))
            label = np.asarray(Image.open(os.path.join(self.root, e["label"])),
                               dtype=np.int64)
        except (OSError, ValueError) as exc:
            raise DataError(f"failed loading sample {index} ({rgb_path}): {exc}") from exc
        if depth_raw.shape != label.shape or rgb.shape[:2] != label.shape:
            raise DataError(f"sample {index}: extent mismatch "
                            f"{rgb.shape} / {depth_raw.shape} / {label.shape}")
        bad = (label != self.ignore_label) & (label >= self.num_classes)
        if bad.any():
            raise DataError(f"sample {index}: label id out of range")
        rgb = np.ascontiguousarray(rgb.transpose(2, 0, 1) / 255.0)
        depth_m = depth_raw.astype(np.float64) / 1000.0  # mm -> m; 0 stays a hole
        return {"rgb": rgb, "depth": DepthMap.from_array(depth_m), "label": label}

    def label_histogram(self) -> np.ndarray:
        hist = np.zeros(self.num_classes, dtype=np.int64)
        for i in range(len(self)):
            lab = self.load_sample(i)["label"]
            valid = lab != self.ignore_label
            hist += np.bincount(lab[valid], minlength=self.num_classes)
        return hist


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass
class SynthConfig:
    image_size: int = 64
    train_scenes: int = 200
    val_scenes: int = 50
    test_scenes: int = 0
    num_classes: int = 6
    confusable_pairs: tuple = ((1, 2), (3, 4))
    boxes_per_scene: tuple = (3, 6)
    box_px: tuple | None = None  # (min, max) box side; default (10, size // 2)
    boundary_void_px: int = 0  # ignore-label band around label transitions
    depth_noise: float = 0.01
    hole_fraction: float = 0.002
    depth_margin: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.boundary_void_px < 0:
            raise GenerationError("boundary_void_px must be >= 0")
        if not self.confusable_pairs:
            raise GenerationError("need at least one texture-confusable class pair")
        for a, b in self.confusable_pairs:
            if not (0 < a < self.num_classes and 0 < b < self.num_classes):
                raise GenerationError(f"confusable pair ({a},{b}) out of range")


def _texture_params(cfg: SynthConfig, rng: np.random.Generator) -> dict:
    """Per-class RGB texture parameters; confusable pairs share one set."""
    params = {}
    shared = {}
    for a, b in cfg.confusable_pairs:
        shared[b] = a
    for c in range(cfg.num_classes):
        if c in shared:
            continue
        params[c] = {"base": rng.uniform(0.15, 0.85, size=3), "amp": rng.uniform(0.05, 0.15)}
    for b, a in shared.items():
        params[b] = params[a]
    return params


def _fill_texture(rgb, mask, tex, rng):
    n = int(mask.sum())
    noise = rng.uniform(-tex["amp"], tex["amp"], size=(n, 3))
    rgb[mask] = np.clip(tex["base"][None, :] + noise, 0.0, 1.0)


def _render_scene(cfg: SynthConfig, tex, rng: np.random.Generator):
    s = cfg.image_size
    protruding = {a for a, _ in cfg.confusable_pairs}
    flush = {b for _, b in cfg.confusable_pairs}
    label = np.zeros((s, s), dtype=np.uint8)
    # slanted far wall
    z0 = rng.uniform(2.5, 3.5)
    tilt = rng.uniform(-0.2, 0.2)
    wall = z0 + tilt * (np.arange(s)[None, :] / s) + np.zeros((s, 1))
    depth = wall.copy()
    rgb = np.zeros((s, s, 3))
    _fill_texture(rgb, np.ones((s, s), bool), tex[0], rng)

    n_boxes = int(rng.integers(cfg.boxes_per_scene[0], cfg.boxes_per_scene[1] + 1))
    lo, hi = cfg.box_px if cfg.box_px is not None else (10, max(11, s // 2))
    classes = [c for c in range(1, cfg.num_classes)]
    for _ in range(n_boxes):
        c = int(rng.choice(classes))
        bh = int(rng.integers(lo, hi + 1))
        bw = int(rng.integers(lo, hi + 1))
        top = int(rng.integers(0, s - bh + 1))
        left = int(rng.integers(0, s - bw + 1))
        mask = np.zeros((s, s), bool)
        mask[top:top + bh, left:left + bw] = True
        label[mask] = c
        _fill_texture(rgb, mask, tex[c], rng)
        if c in protruding:
            # sticks out of the wall toward the camera
            depth[mask] = wall[mask] - rng.uniform(cfg.depth_margin,
                                                   2.5 * cfg.depth_margin)
        elif c in flush:
            depth[mask] = wall[mask]  # inset flush with the wall
        else:
            depth[mask] = rng.uniform(1.0, 2.2)
    depth = depth + rng.normal(0.0, cfg.depth_noise, size=depth.shape)
    depth = np.clip(depth, 0.2, 10.0)
    holes = rng.uniform(size=depth.shape) < cfg.hole_fraction
    depth[holes] = 0.0
    if cfg.boundary_void_px > 0:
        # void band over ambiguous transition pixels, as in datasets that
        # label object boundaries with an ignore value
        transition = np.zeros(label.shape, dtype=bool)
        transition[:, 1:] |= label[:, 1:] != label[:, :-1]
        transition[1:, :] |= label[1:, :] != label[:-1, :]
        dist = distance_transform_edt(~transition)
        label[dist <= cfg.boundary_void_px] = IGNORE_LABEL
    return rgb, depth, label


def synth_generate(cfg: SynthConfig, out_root: str) -> dict:
    """Write train/val(/test) splits of synthetic scenes; returns
    {split: DatasetManifest}. Deterministic for a fixed seed."""
    s = cfg.image_size
    intr = CameraIntrinsics(fx=0.9 * s, fy=0.9 * s, cx=(s - 1) / 2.0, cy=(s - 1) / 2.0)
    os.makedirs(out_root, exist_ok=True)
    intr.save(os.path.join(out_root, "intrinsics.txt"))
    rng = np.random.default_rng(cfg.seed)
    tex = _texture_params(cfg, rng)
    manifests = {}
    counts = {"train": cfg.train_scenes, "val": cfg.val_scenes, "test": cfg.test_scenes}
    for split_i, (split, n) in enumerate(counts.items()):
        if n <= 0:
            continue
        split_dir = os.path.join(out_root, split)
        os.makedirs(split_dir, exist_ok=True)
        entries = []
        for i in range(n):
            scene_rng = np.random.default_rng([cfg.seed, split_i, i])
            rgb, depth, label = _render_scene(cfg, tex, scene_rng)
            base = f"scene_{i:04d}"
            Image.fromarray((rgb * 255).round().astype(np.uint8)).save(
                os.path.join(split_dir, base + "_rgb.png"))
            depth_mm = np.round(depth * 1000.0).astype(np.uint16)
            Image.fromarray(depth_mm).save(
                os.path.join(split_dir, base + "_depth.png"))
            Image.fromarray(label, mode="L").save(
                os.path.join(split_dir, base + "_label.png"))
            entries.append({"rgb": base + "_rgb.png", "depth": base + "_depth.png",
                            "label": base + "_label.png"})
        m = DatasetManifest(root=split_dir, entries=entries, split=split,
                            num_classes=cfg.num_classes,
                            intrinsics_path=os.path.join("..", "intrinsics.txt"))
        m.save()
        manifests[split] = DatasetManifest.load(out_root, split)
    return manifests
