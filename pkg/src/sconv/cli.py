"""Command-line entry points: synth, train, eval, gradcheck, bench, rfvis."""

from __future__ import annotations

import os

# honor the worker cap before numpy initializes its thread pools
_threads = os.environ.get("SCONV_THREADS")
if _threads:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _threads)

import argparse
import dataclasses
import json
import platform
import sys
import time

import numpy as np

from . import __version__, backend
from .data import DatasetManifest, SynthConfig, synth_generate
from .errors import ConfigError, DataError, SconvError
from .gradcheck import run_gradcheck
from .metrics import ConfusionMatrix
from .model import NetworkConfig, SegModel, build, build_baseline_twin, config_from_dict
from .train import TrainConfig, TrainState, evaluate, fit, load_train_state


# ---------------------------------------------------------------------------
# config files: flat "key = value" lines, values in TOML-ish literal syntax

def parse_config_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key = value")
            key, val = (t.strip() for t in line.split("=", 1))
            out[key] = _parse_value(val)
    return out


def _parse_value(val: str):
    low = val.lower()
    if low in ("true", "false"):
        return low == "true"
    if val.startswith("[") or val.startswith("("):
        inner = val.strip("[]()")
        return [_parse_value(t.strip()) for t in inner.split(",") if t.strip()]
    try:
        return int(val)
    except ValueError:
        pass
    try:
        return float(val)
    except ValueError:
        pass
    return val.strip("\"'")


def _split_overrides(pairs):
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"override {p!r} is not key=value")
        k, v = p.split("=", 1)
        out[k.strip()] = _parse_value(v.strip())
    return out


def _apply_fields(cls, base: dict, source: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    picked = {k: v for k, v in source.items() if k in names}
    if cls is NetworkConfig and "widths" in picked:
        picked["widths"] = tuple(picked["widths"])
    if cls is TrainConfig:
        for tup in ("crop", "scale_range"):
            if tup in picked:
                picked[tup] = tuple(picked[tup])
    base.update(picked)
    return base


def _build_configs(args) -> tuple[NetworkConfig, TrainConfig]:
    raw = {}
    if getattr(args, "config", None):
        raw = parse_config_file(args.config)
    raw.update(_split_overrides(getattr(args, "set", None)))
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "precision", None):
        raw["precision"] = args.precision
    if getattr(args, "lr", None) is not None:
        raw["base_lr"] = args.lr
    if getattr(args, "epochs", None) is not None:
        raw["epochs"] = args.epochs
    net = NetworkConfig(**_apply_fields(NetworkConfig, {}, raw))
    tr = TrainConfig(**_apply_fields(TrainConfig, {}, raw))
    return net, tr


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise DataError(f"output dir {out} is not empty (use --force)")
    overrides = _split_overrides(args.set)
    kwargs = _apply_fields(SynthConfig, {}, overrides)
    if args.seed is not None:
        kwargs["seed"] = args.seed
    if args.scenes is not None:
        kwargs["train_scenes"] = args.scenes
    if args.val_scenes is not None:
        kwargs["val_scenes"] = args.val_scenes
    if args.size is not None:
        kwargs["image_size"] = args.size
    cfg = SynthConfig(**kwargs)
    manifests = synth_generate(cfg, out)
    print(json.dumps({"out": out,
                      "splits": {k: len(v) for k, v in manifests.items()}}))
    return 0


def cmd_train(args) -> int:
    net_cfg, tr_cfg = _build_configs(args)
    if args.baseline:
        net_cfg = dataclasses.replace(net_cfg, sconv_policy={})
    model = build(net_cfg)
    train_m = DatasetManifest.load(args.data, "train")
    try:
        val_m = DatasetManifest.load(args.data, "val")
    except DataError:
        val_m = None
    state = None
    os.makedirs(args.out, exist_ok=True)
    if args.resume:
        model.load_checkpoint(os.path.join(args.resume, "checkpoint_last"))
        state = load_train_state(os.path.join(args.resume, "train_state"))
    model.save_checkpoint(os.path.join(args.out, "checkpoint_init"))
    with open(os.path.join(args.out, "train_log.jsonl"), "a") as log_fh:
        state = fit(model, train_m, val_m, tr_cfg, out_dir=args.out,
                    log_fh=log_fh, state=state)
    print(json.dumps({"epochs": state.epoch, "iterations": state.iteration,
                      "best_miou": state.best_miou,
                      "best_checkpoint": state.best_checkpoint}))
    return 0


def _load_model(ckpt_path) -> SegModel:
    manifest = json.load(open(os.path.join(ckpt_path, "manifest.json")))
    model = build(config_from_dict(manifest["config"]))
    model.load_checkpoint(ckpt_path)
    return model


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    manifest = DatasetManifest.load(args.data, args.split)
    tr_cfg = TrainConfig()
    m = evaluate(model, manifest, tr_cfg)
    out_path = os.path.join(args.out or ".", "metrics.json")
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    cmj = {"acc": round(m["acc"], 6), "macc": round(m["macc"], 6),
           "miou": round(m["miou"], 6),
           "per_class": [None if v is None else round(v, 6)
                         for v in m["per_class_iou"]]}
    with open(out_path, "w") as fh:
        json.dump(cmj, fh, indent=2)
        fh.write("\n")
    print(json.dumps(cmj))
    return 0


def cmd_gradcheck(args) -> int:
    rows = run_gradcheck(args.ops, trials=args.trials, tol=args.tol, seed=args.seed or 0)
    width = max(len(f"{r['op']}.{r['group']}") for r in rows)
    ok = True
    for r in rows:
        status = "PASS" if r["passed"] else "FAIL"
        ok &= r["passed"]
        print(f"{r['op'] + '.' + r['group']:<{width}}  max_err={r['max_err']:.3e}  "
              f"tol={r['tol']:.1e}  {status}")
    print(f"gradcheck: {'all passed' if ok else 'FAILURES present'}")
    return 0 if ok else 1


def _bench_model(model, image, spatial, runs, warmup):
    for _ in range(warmup):
        model.forward(image, spatial, train=False)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        model.forward(image, spatial, train=False)
        times.append(time.perf_counter() - t0)
    t = np.asarray(times)
    return {"latency_mean_s": float(t.mean()), "latency_std_s": float(t.std()),
            "images_per_s": float(1.0 / t.mean()), "runs": runs, "warmup": warmup}


def cmd_bench(args) -> int:
    net_cfg, _ = _build_configs(args)
    net_cfg = dataclasses.replace(net_cfg, precision=args.precision or "f32")
    size = args.size
    model = build(net_cfg)
    baseline = build_baseline_twin(net_cfg)
    rng = np.random.default_rng(args.seed or 0)
    dtype = model.dtype
    image = rng.standard_normal((3, size, size)).astype(dtype)
    spatial = rng.standard_normal(
        (net_cfg.spatial_channels(), size, size)).astype(dtype)
    report = {
        "machine": f"{platform.platform()} / {platform.processor() or 'unknown cpu'}",
        "backend": backend.BACKEND,
        "precision": net_cfg.precision,
        "input_extents": [size, size],
        "protocol": "single-image forward latency, I/O excluded, "
                    f"{args.warmup} warmup + {args.runs} timed runs; not comparable "
                    "to published full-scale FPS figures",
        "models": {},
    }
    for name, m, sp in (("baseline", baseline, None), ("sgnet", model, spatial)):
        stats = _bench_model(m, image, sp, args.runs, args.warmup)
        stats["params"] = m.count_params()
        report["models"][name] = stats
    report["latency_ratio"] = (report["models"]["sgnet"]["latency_mean_s"]
                               / report["models"]["baseline"]["latency_mean_s"])
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench_report.json"), "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
    print(json.dumps(report, indent=2))
    return 0


def cmd_rfvis(args) -> int:
    from PIL import Image

    model = _load_model(args.checkpoint)
    manifest = DatasetManifest.load(args.data, args.split)
    sample = manifest.load_sample(args.index)
    from .geometry import encode_spatial
    spatial = encode_spatial(sample["depth"], manifest.intrinsics(),
                             model.config.source_kind)
    maps = model.receptive_field_maps(sample["rgb"], spatial)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    written = []
    for name, arr in maps:
        # stage{s}.block{b}.conv{c} -> rf_stage{s}_block{b}_conv{c}.png
        fname = "rf_" + name.replace(".", "_") + ".png"
        img = np.clip(np.round(arr), 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(os.path.join(out, fname))
        written.append(fname)
    print(json.dumps({"maps": written}))
    return 0


# ---------------------------------------------------------------------------

def _add_common(p, train_flags=False):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--precision", choices=["f32", "f64"], default=None)
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field")
    if train_flags:
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--epochs", type=int, default=None)


def make_parser():
    ap = argparse.ArgumentParser(prog="sconv",
                                 description="spatially guided convolution toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic RGBD dataset")
    _add_common(p)
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--val-scenes", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_common(p, train_flags=True)
    p.add_argument("--data", required=True)
    p.add_argument("--baseline", action="store_true",
                   help="train the plain-conv twin instead")
    p.add_argument("--resume", help="checkpoint dir to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all backwards")
    _add_common(p)
    p.add_argument("--ops", default="all")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="forward-latency benchmark vs baseline twin")
    _add_common(p)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("rfvis", help="export receptive-field maps as PNGs")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(func=cmd_rfvis)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except SconvError as exc:
        sys.stderr.write(json.dumps({"category": exc.category, "message": str(exc)}) + "\n")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
