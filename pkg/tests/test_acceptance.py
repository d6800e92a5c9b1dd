"""End-to-end acceptance suite.

Each test prints a single ``ACCEPT <n> <name>: PASS/FAIL`` line so the run
log doubles as a criterion checklist. The training-based cases (4, 5, 10)
share one set of runs via session fixtures and take several minutes each
on a single CPU core.
"""

import json
import sys
import time

import numpy as np
import pytest

from sconv import gradcheck, ops
from sconv.cli import main as cli_main
from sconv.data import DatasetManifest, SynthConfig, synth_generate
from sconv.geometry import encode_spatial
from sconv.metrics import ConfusionMatrix
from sconv.model import NetworkConfig, build, build_baseline_twin
from sconv.sconv import GUIDE_CHANNELS, SConv2d, sconv_param_count
from sconv.tensor import ConvGeometry
from sconv.train import TrainConfig, TrainState, fit, poly_lr, sgd_step

# compact config used by the training-based criteria (4, 5, 10, 11);
# criteria 6 and 7 use the package default configuration
TRAIN_WIDTHS = (16, 32, 64, 352)


def report(num, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    line = f"ACCEPT {num} {name}: {status}" + (f"  ({detail})" if detail else "")
    print("\n" + line)
    # also bypass pytest's capture so a plain `pytest -v` log keeps the
    # checklist even for passing tests
    print(line, file=sys.__stdout__)
    assert ok, f"criterion {num} ({name}) failed: {detail}"


# ---------------------------------------------------------------------------
# shared training runs

@pytest.fixture(scope="session")
def geometry_gain_runs(tmp_path_factory):
    """Criterion 4/10 backing runs: 3 seeds x (sgnet, baseline twin) on the
    200/50-scene texture-confusable dataset."""
    root = tmp_path_factory.mktemp("gain_data")
    synth_generate(SynthConfig(image_size=64, train_scenes=200, val_scenes=50,
                               seed=0), str(root))
    train_m = DatasetManifest.load(str(root), "train")
    val_m = DatasetManifest.load(str(root), "val")
    results = {"root": str(root), "seeds": [], "t0": time.time()}
    out_root = tmp_path_factory.mktemp("gain_runs")
    for seed in (0, 1, 2):
        net = NetworkConfig(widths=TRAIN_WIDTHS, f_hidden=8,
                            precision="f32", seed=seed)
        cfg = TrainConfig(epochs=10, batch_size=4, crop=(64, 64), seed=seed)
        pair = {}
        for label, model in (("sgnet", build(net)),
                             ("baseline", build_baseline_twin(net))):
            out_dir = out_root / f"{label}_{seed}"
            out_dir.mkdir()
            state = fit(model, train_m, val_m, cfg, out_dir=str(out_dir))
            pair[label] = {"best_miou": state.best_miou,
                           "checkpoint": state.best_checkpoint,
                           "out": str(out_dir)}
        results["seeds"].append(pair)
    results["elapsed"] = time.time() - results["t0"]
    return results


# ---------------------------------------------------------------------------

def test_criterion_1_degenerate_equivalence(rng):
    t0 = time.time()
    worst = 0.0
    for _ in range(50):
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        geom = ConvGeometry(kh, kw, stride=int(rng.integers(1, 3)),
                            padding=int(rng.integers(0, 2)))
        c_in, c_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = int(rng.integers(kh + 2, 10)), int(rng.integers(kw + 2, 10))
        layer = SConv2d(c_in, c_out, geom, rng, f_hidden=4)
        layer.force_zero_offsets = True
        layer.force_unit_mask = True
        x = rng.standard_normal((c_in, h, w))
        sp = rng.standard_normal((GUIDE_CHANNELS, h, w))
        try:
            geom.out_size(h, w)
        except Exception:
            continue
        y = layer.forward(x, sp)
        ref, _ = ops.conv2d_forward(x, layer.params["w"], None, geom)
        worst = max(worst, float(np.max(np.abs(y - ref))))
    elapsed = time.time() - t0
    report(1, "degenerate-equivalence", worst <= 1e-12 and elapsed < 10,
           f"max_abs_diff={worst:.2e} over 50 draws, {elapsed:.1f}s")


def test_criterion_2_fresh_init_halving(rng):
    t0 = time.time()
    worst = 0.0
    for _ in range(20):
        geom = ConvGeometry(3, 3, stride=int(rng.integers(1, 3)), padding=1)
        layer = SConv2d(int(rng.integers(1, 5)), int(rng.integers(1, 5)),
                        geom, rng, f_hidden=4)
        x = rng.standard_normal((layer.c_in, 7, 7))
        sp = rng.standard_normal((GUIDE_CHANNELS, 7, 7))
        y = layer.forward(x, sp)
        ref, _ = ops.conv2d_forward(x, layer.params["w"], None, geom)
        worst = max(worst, float(np.max(np.abs(y - 0.5 * ref))))
    elapsed = time.time() - t0
    report(2, "fresh-init-halving", worst <= 1e-12 and elapsed < 5,
           f"max_abs_diff={worst:.2e}, {elapsed:.1f}s")


def test_criterion_3_gradient_suite():
    t0 = time.time()
    rows = gradcheck.run_gradcheck("all", trials=20, tol=1e-5, seed=0)
    elapsed = time.time() - t0
    failures = [r for r in rows if not r["passed"]]
    worst = max(r["max_err"] for r in rows)
    report(3, "gradient-suite", not failures and elapsed < 300,
           f"{len(rows)} groups, worst={worst:.2e}, {elapsed:.0f}s")


def test_criterion_4_geometry_gain(geometry_gain_runs):
    gaps = [s["sgnet"]["best_miou"] - s["baseline"]["best_miou"]
            for s in geometry_gain_runs["seeds"]]
    median_gap = float(np.median(gaps)) * 100.0
    elapsed = geometry_gain_runs["elapsed"]
    detail = (f"median gap {median_gap:.1f} mIoU pts over seeds "
              f"(gaps {[round(g * 100, 1) for g in gaps]}), {elapsed / 60:.1f} min")
    report(4, "geometry-gain", median_gap >= 5.0 and elapsed < 1800, detail)


def test_criterion_5_overfit_sanity(tmp_path):
    t0 = time.time()
    root = tmp_path / "overfit_data"
    synth_generate(SynthConfig(image_size=64, train_scenes=8, val_scenes=0,
                               boxes_per_scene=(1, 1), box_px=(24, 40),
                               boundary_void_px=2, seed=0), str(root))
    m = DatasetManifest.load(str(root), "train")
    model = build(NetworkConfig(widths=TRAIN_WIDTHS, f_hidden=8,
                                precision="f32", seed=0))
    # long poly schedule halted at 2000 iterations keeps the LR near base_lr
    cfg = TrainConfig(base_lr=0.02, weight_decay=0.0, batch_size=1,
                      epochs=1000, crop=(64, 64), scale_range=(1.0, 1.0),
                      hflip_prob=0.0, seed=0)

    def train_acc():
        cm = ConfusionMatrix(m.num_classes)
        for i in range(len(m)):
            s = m.load_sample(i)
            sp = encode_spatial(s["depth"], m.intrinsics(), "depth")
            logits = model.forward(s["rgb"], sp, train=True)[0]
            cm.accumulate(logits.argmax(axis=0), s["label"], m.ignore_label)
        return cm.compute()["acc"]

    state, acc = None, 0.0
    for e in range(5, 251, 5):
        state = fit(model, m, None, cfg, state=state, stop_epoch=e)
        acc = train_acc()
        if acc >= 0.99:
            break
    elapsed = time.time() - t0
    report(5, "overfit-sanity",
           acc >= 0.99 and state.iteration <= 2000 and elapsed < 600,
           f"acc={acc:.4f} at iter {state.iteration}, {elapsed / 60:.1f} min")


def test_criterion_6_parameter_overhead():
    model = build(NetworkConfig())  # package defaults
    counts = model.count_params()  # raises if closed form != registry
    closed = 0
    for _, conv in model.iter_sconvs():
        c = sconv_param_count(conv.c_in, conv.c_out, conv.geom.K,
                              conv.f_hidden, bias="b" in conv.params)
        closed += c["eta"] + c["f"]
    closed += model.phi.param_count()
    ok = (counts["overhead_pct"] <= 5.0 and closed == counts["sconv_extra"])
    report(6, "parameter-overhead", ok,
           f"extra={counts['sconv_extra']} / baseline="
           f"{counts['total'] - counts['sconv_extra']} "
           f"= {counts['overhead_pct']:.2f}%")


def test_criterion_7_latency_overhead(tmp_path, capsys):
    code = cli_main(["bench", "--size", "64", "--runs", "30", "--warmup", "5",
                     "--precision", "f32", "--out", str(tmp_path)])
    assert code == 0
    capsys.readouterr()
    rep = json.loads((tmp_path / "bench_report.json").read_text())
    ratio = rep["latency_ratio"]
    report(7, "latency-overhead", ratio <= 2.0,
           f"sgnet/baseline forward ratio {ratio:.2f}x at 64x64 "
           f"(mean over 30 runs)")


def test_criterion_8_metrics_oracle(rng):
    from test_metrics import brute_force_metrics

    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 7))
        pred = rng.integers(0, n, size=(11, 13))
        gt = rng.integers(0, n, size=(11, 13))
        gt[rng.uniform(size=gt.shape) < 0.05] = 255
        out = ConfusionMatrix(n).accumulate(pred, gt).compute()
        ref = brute_force_metrics(pred, gt, n)
        worst = max(worst, *(abs(out[k] - ref[k])
                             for k in ("acc", "macc", "miou")))
    gt = rng.integers(0, 4, size=(8, 8))
    perfect = ConfusionMatrix(4).accumulate(gt.copy(), gt).compute()
    ok = (worst == 0.0
          and perfect["acc"] == perfect["macc"] == perfect["miou"] == 1.0)
    report(8, "metrics-oracle", ok, f"max_diff={worst:.1e} over 100 pairs")


def test_criterion_9_schedule_optimizer_exactness():
    lr_ok = (poly_lr(0, 100, 0.01, 0.9) == 0.01
             and poly_lr(100, 100, 0.01, 0.9) == 0.0)

    model = build(NetworkConfig(widths=(4, 4, 8, 8), f_hidden=4, seed=1))
    state = TrainState()
    name, p, g, decay = next(model.named_params())
    p_ref = p.copy()
    rng = np.random.default_rng(3)
    grads = [rng.standard_normal(p.shape) for _ in range(2)]
    lr, mom, wd = 0.05, 0.9, 1e-3
    for gr in grads:
        g[:] = gr
        sgd_step(model, state, lr, mom, wd)
    v = np.zeros_like(p_ref)
    for gr in grads:
        v = mom * v + gr + (wd * p_ref if decay else 0)
        p_ref = p_ref - lr * v
    sgd_err = float(np.max(np.abs(p - p_ref)))
    report(9, "schedule-optimizer-exactness", lr_ok and sgd_err <= 1e-12,
           f"endpoints exact, two-step sgd err={sgd_err:.1e}")


def test_criterion_10_receptive_field_export(geometry_gain_runs, rng):
    # fresh model: all-zero maps
    fresh = build(NetworkConfig(widths=TRAIN_WIDTHS, f_hidden=8,
                                precision="f32", seed=0))
    image = rng.standard_normal((3, 64, 64))
    spatial = rng.standard_normal((1, 64, 64))
    fresh_zero = all(arr.max() == 0.0
                     for _, arr in fresh.receptive_field_maps(image, spatial))

    # trained model: maps respond to the depth input
    best = geometry_gain_runs["seeds"][0]["sgnet"]["checkpoint"]
    trained = build(NetworkConfig(widths=TRAIN_WIDTHS, f_hidden=8,
                                  precision="f32", seed=0))
    trained.load_checkpoint(best)
    m = DatasetManifest.load(geometry_gain_runs["root"], "val")
    s = m.load_sample(0)
    sp = encode_spatial(s["depth"], m.intrinsics(), "depth")
    maps_a = trained.receptive_field_maps(s["rgb"], sp)
    perturbed = sp + 0.25 * rng.standard_normal(sp.shape)
    maps_b = trained.receptive_field_maps(s["rgb"], perturbed)
    in_range = all(0.0 <= arr.min() and arr.max() <= 255.0
                   for _, arr in maps_a)
    moved = max(float(np.max(np.abs(a - b)))
                for (_, a), (_, b) in zip(maps_a, maps_b))
    report(10, "receptive-field-export",
           fresh_zero and in_range and moved > 0.0,
           f"fresh all-zero={fresh_zero}, depth perturbation moved maps by "
           f"up to {moved:.2f}/255")


def test_criterion_11_determinism(tiny_dataset, tmp_path):
    def one_run(out):
        model = build(NetworkConfig(widths=(4, 4, 8, 8), f_hidden=4, seed=21))
        model.save_checkpoint(out / "init")
        log = out / "log.jsonl"
        with open(log, "w") as fh:
            fit(model, tiny_dataset["manifests"]["train"],
                tiny_dataset["manifests"]["val"],
                TrainConfig(epochs=1, batch_size=2, crop=(32, 32), seed=21),
                log_fh=fh)
        records = [json.loads(l) for l in log.read_text().splitlines()]
        first_loss = next(r["loss"] for r in records if "iter" in r)
        metrics = next(r for r in records if "miou" in r)
        return first_loss, metrics

    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    a_dir.mkdir(), b_dir.mkdir()
    loss_a, met_a = one_run(a_dir)
    loss_b, met_b = one_run(b_dir)

    ident = True
    for f in sorted((a_dir / "init").iterdir()):
        if (b_dir / "init" / f.name).read_bytes() != f.read_bytes():
            ident = False
    ok = ident and loss_a == loss_b and met_a == met_b
    report(11, "determinism", ok,
           f"init checkpoints bit-identical={ident}, first loss "
           f"{loss_a:.6f}=={loss_b:.6f}, metrics equal={met_a == met_b}")
