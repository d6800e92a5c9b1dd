"""SGD training with a poly learning-rate schedule, joint geometric
augmentation of RGB/depth/label, median-frequency class reweighting, and
the train/eval loops.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, NumericError
from .geometry import DepthMap, encode_spatial
from .metrics import ConfusionMatrix
from .model import SegModel
from .tensor import save_tensor, load_tensor


# ---------------------------------------------------------------------------
# config / state

@dataclass
class TrainConfig:
    base_lr: float = 5e-3
    poly_power: float = 0.9
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 10
    crop: tuple = (64, 64)
    scale_range: tuple = (0.75, 1.25)
    hflip_prob: float = 0.5
    aux_weight: float = 0.4
    class_reweight: bool = False
    normalize_spatial: bool = True
    lr_step_granularity: str = "iteration"  # or "epoch"
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.scale_range[0] > self.scale_range[1]:
            raise ConfigError("scale_range must be ordered")
        if self.lr_step_granularity not in ("iteration", "epoch"):
            raise ConfigError(f"bad lr_step_granularity {self.lr_step_granularity!r}")


@dataclass
class TrainState:
    iteration: int = 0
    epoch: int = 0
    momentum_buffers: dict = field(default_factory=dict)
    best_miou: float = -1.0
    best_checkpoint: str | None = None
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# schedule / optimizer

def poly_lr(iteration: int, max_iter: int, base_lr: float, power: float) -> float:
    """lr = base * (1 - iter/max_iter)^power, clamped to 0 past the end."""
    if iteration >= max_iter:
        return 0.0
    return base_lr * (1.0 - iteration / max_iter) ** power


def sgd_step(model: SegModel, state: TrainState, lr: float, momentum: float,
             weight_decay: float):
    """v <- momentum*v + grad + wd*param; param <- param - lr*v.

    Normalization scale/shift parameters are excluded from weight decay.
    """
    bufs = state.momentum_buffers
    for name, v, g, decay in model.named_params():
        buf = bufs.get(name)
        if buf is None:
            buf = bufs[name] = np.zeros_like(v)
        step = g + weight_decay * v if (weight_decay and decay) else g
        buf *= momentum
        buf += step
        v -= lr * buf


# ---------------------------------------------------------------------------
# augmentation

def _resize_rgb_depth(arr: np.ndarray, h2: int, w2: int) -> np.ndarray:
    out, _ = ops.bilinear_resize(arr, h2, w2)
    return out


def _resize_label(label: np.ndarray, h2: int, w2: int) -> np.ndarray:
    h, w = label.shape
    sy = np.clip(np.round((np.arange(h2) + 0.5) * h / h2 - 0.5).astype(int), 0, h - 1)
    sx = np.clip(np.round((np.arange(w2) + 0.5) * w / w2 - 0.5).astype(int), 0, w - 1)
    return label[sy[:, None], sx[None, :]]


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Order-independent per-sample generator (parallel-worker safe)."""
    return np.random.default_rng([seed, epoch, index])


def augment(sample: dict, cfg: TrainConfig, rng: np.random.Generator,
            ignore_label: int = 255) -> dict:
    """One shared geometric transform over rgb (bilinear), depth
    (bilinear, values divided by the zoom factor), and label (nearest,
    ignore-filled padding).
    """
    rgb = sample["rgb"]
    depth: DepthMap = sample["depth"]
    label = sample["label"]
    ch, cw = cfg.crop
    scale = float(rng.uniform(*cfg.scale_range))
    h, w = label.shape
    h2 = max(1, int(round(h * scale)))
    w2 = max(1, int(round(w * scale)))
    if (h2, w2) != (h, w):
        rgb = _resize_rgb_depth(rgb, h2, w2)
        # zooming rescales apparent depth so geometry stays consistent
        dvals = _resize_rgb_depth(depth.values, h2, w2) / scale
        label = _resize_label(label, h2, w2)
    else:
        rgb = rgb.copy()
        dvals = depth.values / scale if scale != 1.0 else depth.values.copy()
        label = label.copy()

    pad_h = max(0, ch - h2)
    pad_w = max(0, cw - w2)
    if pad_h or pad_w:
        rgb = np.pad(rgb, ((0, 0), (0, pad_h), (0, pad_w)))
        dvals = np.pad(dvals, ((0, 0), (0, pad_h), (0, pad_w)))  # 0 = hole
        label = np.pad(label, ((0, pad_h), (0, pad_w)), constant_values=ignore_label)
        h2, w2 = rgb.shape[1:]
    top = int(rng.integers(0, h2 - ch + 1))
    left = int(rng.integers(0, w2 - cw + 1))
    rgb = rgb[:, top:top + ch, left:left + cw]
    dvals = dvals[:, top:top + ch, left:left + cw]
    label = label[top:top + ch, left:left + cw]
    if rng.uniform() < cfg.hflip_prob:
        rgb = rgb[:, :, ::-1].copy()
        dvals = dvals[:, :, ::-1].copy()
        label = label[:, ::-1].copy()
    return {"rgb": np.ascontiguousarray(rgb),
            "depth": DepthMap.from_array(np.ascontiguousarray(dvals)),
            "label": np.ascontiguousarray(label)}


# ---------------------------------------------------------------------------
# class weights

def compute_class_weights(histogram: np.ndarray):
    """Median-frequency balancing: w_c = median(freq)/freq_c.

    Absent classes get weight 0; returns (weights, absent_flag).
    """
    counts = np.asarray(histogram, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        raise ConfigError("empty label histogram")
    freq = counts / total
    present = counts > 0
    med = float(np.median(freq[present]))
    weights = np.zeros_like(freq)
    weights[present] = med / freq[present]
    return weights, bool((~present).any())


# ---------------------------------------------------------------------------
# train / eval loops

def _encode(sample, manifest, net_cfg, train_cfg):
    return encode_spatial(sample["depth"], manifest.intrinsics(), net_cfg.source_kind,
                          normalize=train_cfg.normalize_spatial)


def evaluate(model: SegModel, manifest, train_cfg: TrainConfig) -> dict:
    cm = ConfusionMatrix(manifest.num_classes)
    for i in range(len(manifest)):
        sample = manifest.load_sample(i)
        spatial = _encode(sample, manifest, model.config, train_cfg) \
            if model.has_sconv else None
        logits, _ = model.forward(sample["rgb"], spatial, train=False)
        pred = logits.argmax(axis=0)
        cm.accumulate(pred, sample["label"], manifest.ignore_label)
    return cm.compute()


def fit(model: SegModel, train_manifest, val_manifest, cfg: TrainConfig,
        out_dir=None, log_fh=None, state: TrainState | None = None,
        stop_epoch: int | None = None) -> TrainState:
    """Train, evaluating on the held-out split once per epoch and keeping
    the best-mIoU checkpoint. Deterministic for a fixed seed.

    ``stop_epoch`` halts early while keeping the full-length learning-rate
    schedule, so a halted run resumed later is bit-identical to a straight
    one.
    """
    if state is None:
        state = TrainState()
    net_cfg = model.config
    dtype = model.dtype
    steps_per_epoch = max(1, len(train_manifest) // cfg.batch_size)
    max_iter = cfg.epochs * steps_per_epoch
    target_epoch = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)

    class_weights = None
    if cfg.class_reweight:
        hist = train_manifest.label_histogram()
        weights, _ = compute_class_weights(hist)
        class_weights = weights.astype(dtype)

    while state.epoch < target_epoch:
        epoch = state.epoch
        batch_losses = []
        n_in_batch = 0
        loss_sum = aux_sum = 0.0
        for idx in range(len(train_manifest)):
            rng = sample_rng(cfg.seed, epoch, idx)
            sample = augment(train_manifest.load_sample(idx), cfg, rng,
                             train_manifest.ignore_label)
            spatial = _encode(sample, train_manifest, net_cfg, cfg) \
                if model.has_sconv else None
            logits, aux = model.forward(sample["rgb"], spatial, train=True)
            loss, dmain, _ = ops.softmax_cross_entropy(
                logits, sample["label"], train_manifest.ignore_label, class_weights)
            aux_loss = 0.0
            daux = None
            if aux is not None:
                aux_loss, daux, _ = ops.softmax_cross_entropy(
                    aux, sample["label"], train_manifest.ignore_label, class_weights)
                daux = (cfg.aux_weight * daux).astype(dtype)
            total = loss + cfg.aux_weight * aux_loss
            if not np.isfinite(total):
                raise NumericError(
                    f"NaN/Inf loss at iter {state.iteration} epoch {epoch} "
                    f"sample {idx} (lr would be "
                    f"{poly_lr(state.iteration, max_iter, cfg.base_lr, cfg.poly_power):.3e})")
            model.backward(dmain.astype(dtype), daux)
            loss_sum += loss
            aux_sum += aux_loss
            n_in_batch += 1
            if n_in_batch == cfg.batch_size:
                for _, _, g, _ in model.named_params():
                    g /= n_in_batch
                sched_pos = state.iteration if cfg.lr_step_granularity == "iteration" \
                    else epoch * steps_per_epoch
                lr = poly_lr(sched_pos, max_iter, cfg.base_lr, cfg.poly_power)
                sgd_step(model, state, lr, cfg.momentum, cfg.weight_decay)
                model.zero_grads()
                rec = {"iter": state.iteration, "lr": lr,
                       "loss": loss_sum / n_in_batch,
                       "aux_loss": aux_sum / n_in_batch, "epoch": epoch}
                batch_losses.append(rec["loss"])
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                state.iteration += 1
                n_in_batch = 0
                loss_sum = aux_sum = 0.0
        model.zero_grads()  # drop any ragged tail gradients

        epoch_rec = {"epoch": epoch,
                     "mean_loss": float(np.mean(batch_losses)) if batch_losses else None}
        if val_manifest is not None and len(val_manifest) > 0:
            m = evaluate(model, val_manifest, cfg)
            epoch_rec.update({"miou": m["miou"], "acc": m["acc"], "macc": m["macc"]})
            if out_dir is not None:
                with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
                    json.dump({k: round(m[k], 6) for k in ("acc", "macc", "miou")},
                              fh, indent=2)
            if m["miou"] > state.best_miou:
                state.best_miou = m["miou"]
                if out_dir is not None:
                    best = os.path.join(out_dir, "checkpoint_best")
                    model.save_checkpoint(best)
                    state.best_checkpoint = best
        state.history.append(epoch_rec)
        if log_fh is not None:
            log_fh.write(json.dumps(epoch_rec) + "\n")
            log_fh.flush()
        state.epoch += 1
        if out_dir is not None:
            model.save_checkpoint(os.path.join(out_dir, "checkpoint_last"))
            save_train_state(os.path.join(out_dir, "train_state"), state)
    return state


# ---------------------------------------------------------------------------
# train-state persistence (for resume)

def save_train_state(path, state: TrainState):
    os.makedirs(path, exist_ok=True)
    meta = {"iteration": state.iteration, "epoch": state.epoch,
            "best_miou": state.best_miou, "best_checkpoint": state.best_checkpoint,
            "history": state.history,
            "momentum_names": sorted(state.momentum_buffers)}
    for name, buf in state.momentum_buffers.items():
        save_tensor(os.path.join(path, name.replace("/", "_") + ".sct"), buf)
    with open(os.path.join(path, "state.json"), "w") as fh:
        json.dump(meta, fh)


def load_train_state(path) -> TrainState:
    meta = json.load(open(os.path.join(path, "state.json")))
    state = TrainState(iteration=meta["iteration"], epoch=meta["epoch"],
                       best_miou=meta["best_miou"],
                       best_checkpoint=meta["best_checkpoint"],
                       history=meta["history"])
    for name in meta["momentum_names"]:
        state.momentum_buffers[name] = load_tensor(
            os.path.join(path, name.replace("/", "_") + ".sct"))
    return state
