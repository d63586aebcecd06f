"""Numba vs numpy timings for the hot kernels, plus end-to-end workloads.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--skip-e2e]

Kernel rows call the ``*_np`` and ``*_nb`` implementations side by side in one
process. The end-to-end rows run a training step and frame-statistics pass in
subprocesses, once as installed and once with OMNILAB_PURE_NUMPY=1.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from omnilab import kernels
from omnilab._accel import NUMBA_ENABLED


def best_of(fn, repeat):
    fn()  # warm-up (includes JIT compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases():
    r = np.random.default_rng(0)
    att = r.normal(size=(16, 4, 260, 260)).astype(np.float32)
    att_y = kernels.softmax_np(att)
    act = r.normal(size=(16, 260, 512)).astype(np.float32)
    tok = r.normal(size=(16, 260, 128)).astype(np.float32)
    _, rr = kernels.rms_norm_np(tok, 1e-6)
    qk = r.normal(size=(16, 260, 4, 32)).astype(np.float32)
    ang = r.normal(size=(260, 16))
    cos, sin = np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)
    fa, fb = r.integers(0, 256, size=(2, 360, 640, 3), dtype=np.uint8)
    return {
        "softmax": lambda k: k["softmax"](att),
        "softmax_bwd": lambda k: k["softmax_bwd"](att_y, att),
        "rms_norm": lambda k: k["rms_norm"](tok, 1e-6),
        "rms_norm_bwd": lambda k: k["rms_norm_bwd"](tok, rr, tok),
        "silu": lambda k: k["silu"](act),
        "silu_bwd": lambda k: k["silu_bwd"](act, act),
        "rotate_pairs": lambda k: k["rotate_pairs"](qk, cos, sin),
        "hsv_delta": lambda k: k["hsv_delta"](fa, fb),
        "block_histograms": lambda k: k["block_histograms"](fa, 4, 16),
    }


def impls(suffix):
    return {name: getattr(kernels, f"{name}_{suffix}") for name in kernel_cases()}


E2E = r"""
import time, numpy as np
from omnilab import decoder as dec, toybench as tb, pairminer as pm
from omnilab.numcore import AdamWState, seeded_stream
cfg = tb.ExperimentConfig()
params = dec.init_params(cfg.model, seeded_stream(0))
state = AdamWState.for_params(params)
data = seeded_stream(1)
tb.train_step(params, state, tb.make_batch(cfg, data), cfg.model)
t0 = time.perf_counter()
for _ in range(3):
    tb.train_step(params, state, tb.make_batch(cfg, data), cfg.model)
step = (time.perf_counter() - t0) / 3
r = np.random.default_rng(0)
frames = list(r.integers(0, 256, size=(40, 360, 640, 3), dtype=np.uint8))
pm.compute_frame_stats(frames[:2])
t0 = time.perf_counter()
pm.compute_frame_stats(frames)
stats = time.perf_counter() - t0
print(step, stats)
"""


def end_to_end(pure):
    env = dict(os.environ)
    if pure:
        env["OMNILAB_PURE_NUMPY"] = "1"
    else:
        env.pop("OMNILAB_PURE_NUMPY", None)
    out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
    return tuple(float(x) for x in out.stdout.split())


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()

    print(f"numba enabled: {NUMBA_ENABLED}   svml: {kernels.SVML}")
    print(f"dispatch: {kernels.active_backends()}\n")
    cases = kernel_cases()
    np_impl, nb_impl = impls("np"), impls("nb")
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in cases.items():
        t_np = best_of(lambda: fn(np_impl), args.repeat)
        t_nb = best_of(lambda: fn(nb_impl), args.repeat) if NUMBA_ENABLED else float("nan")
        print(f"{name:<18}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.2f}x")

    if not args.skip_e2e:
        print(f"\n{'workload':<32}{'numpy s':>10}{'default s':>10}")
        pure, default = end_to_end(True), end_to_end(False)
        print(f"{'train step (default config)':<32}{pure[0]:>10.3f}{default[0]:>10.3f}")
        print(f"{'frame stats (40 x 640x360)':<32}{pure[1]:>10.3f}{default[1]:>10.3f}")


if __name__ == "__main__":
    main()
