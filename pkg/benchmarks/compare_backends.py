"""Compare the compiled kernel backend against the pure-NumPy fallback.

Times the four hot kernels (im2col / col2im / deform_gather /
deform_gather_backward) and a full S-Conv forward+backward on both
backends, checks that the outputs agree, and prints a table plus JSON.

Run:  python3 benchmarks/compare_backends.py [--runs N] [--out report.json]
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from sconv import _kernels_py
from sconv import backend as bk

try:
    from sconv import _kernels_cy
except ImportError:
    _kernels_cy = None


def _time(fn, runs, warmup=3):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def make_cases(rng):
    x = rng.standard_normal((64, 32, 32))
    cols = _kernels_py.im2col(x, 3, 3, 1, 1, 1)
    fmap = np.ascontiguousarray(rng.standard_normal((32, 32, 64)))
    coords = np.ascontiguousarray(rng.uniform(-1, 32, size=(9, 32, 32, 2)))
    gathered = _kernels_py.deform_gather(fmap, coords)
    dout = rng.standard_normal(gathered.shape)
    m = np.ascontiguousarray(rng.uniform(0, 1, size=(9, 32 * 32)))
    packed = _kernels_py.pack_cols_cmajor(gathered)
    return {
        "im2col": lambda k: k.im2col(x, 3, 3, 1, 1, 1),
        "col2im": lambda k: k.col2im(cols, 64, 32, 32, 3, 3, 1, 1, 1),
        "deform_gather": lambda k: k.deform_gather(fmap, coords),
        "deform_gather_backward":
            lambda k: k.deform_gather_backward(dout, fmap, coords),
        "pack_cols_cmajor": lambda k: k.pack_cols_cmajor(gathered),
        "pack_cols_cmajor_mod": lambda k: k.pack_cols_cmajor_mod(gathered, m),
        "pack_cols_kmajor": lambda k: k.pack_cols_kmajor(gathered),
        "unpack_cols_cmajor": lambda k: k.unpack_cols_cmajor(packed, 9, 32, 32),
    }


def sconv_case(rng):
    from sconv.sconv import SConv2d
    from sconv.tensor import ConvGeometry

    geom = ConvGeometry(3, 3, stride=1, padding=1)
    layer = SConv2d(16, 16, geom, rng, f_hidden=8)
    layer.params["eta.w"] = 0.05 * rng.standard_normal(layer.params["eta.w"].shape)
    layer.params["f.1.w"] = 0.3 * rng.standard_normal(layer.params["f.1.w"].shape)
    x = rng.standard_normal((16, 32, 32))
    sp = rng.standard_normal((64, 32, 32))
    probe = rng.standard_normal((16, 32, 32))

    def run():
        layer.forward(x, sp)
        layer.backward(probe)

    return run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", type=int, default=20)
    ap.add_argument("--out", help="write JSON report here")
    args = ap.parse_args()

    if _kernels_cy is None:
        raise SystemExit("compiled extension not available; build it first "
                         "(pip install -e . --no-build-isolation)")

    rng = np.random.default_rng(0)
    cases = make_cases(rng)
    report = {"kernels": {}, "runs": args.runs}

    print(f"{'kernel':<26} {'pure (ms)':>10} {'compiled (ms)':>14} {'speedup':>8}")
    for name, fn in cases.items():
        a = fn(_kernels_py)
        b = fn(_kernels_cy)
        pa = a if isinstance(a, np.ndarray) else a[0]
        pb = b if isinstance(b, np.ndarray) else b[0]
        if not np.allclose(pa, pb, rtol=1e-12, atol=1e-12):
            raise SystemExit(f"backend mismatch in {name}")
        t_py = _time(lambda: fn(_kernels_py), args.runs)
        t_cy = _time(lambda: fn(_kernels_cy), args.runs)
        report["kernels"][name] = {"pure_ms": t_py * 1e3, "compiled_ms": t_cy * 1e3,
                                   "speedup": t_py / t_cy, "agree": True}
        print(f"{name:<26} {t_py*1e3:>10.3f} {t_cy*1e3:>14.3f} {t_py/t_cy:>7.1f}x")

    # full layer forward+backward through each backend (ops/sconv call
    # through the backend module, so rebinding its attributes suffices)
    names = ("im2col", "col2im", "deform_gather", "deform_gather_backward",
             "pack_cols_cmajor", "pack_cols_cmajor_mod", "pack_cols_kmajor",
             "unpack_cols_cmajor", "unpack_cols_kmajor")
    saved = {n: getattr(bk, n) for n in names}
    timings = {}
    try:
        for label, mod in (("pure", _kernels_py), ("compiled", _kernels_cy)):
            for n in names:
                setattr(bk, n, getattr(mod, n))
            run = sconv_case(np.random.default_rng(1))
            timings[label] = _time(run, max(5, args.runs // 2)) * 1e3
    finally:
        for n, fn in saved.items():
            setattr(bk, n, fn)
    report["sconv_fwd_bwd"] = {"pure_ms": timings["pure"],
                               "compiled_ms": timings["compiled"],
                               "speedup": timings["pure"] / timings["compiled"]}
    print(f"{'sconv fwd+bwd':<26} {timings['pure']:>10.3f} "
          f"{timings['compiled']:>14.3f} {timings['pure']/timings['compiled']:>7.1f}x")

    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")


if __name__ == "__main__":
    main()
