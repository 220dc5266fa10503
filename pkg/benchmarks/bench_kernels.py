"""Compiled kernels vs their pure-numpy / pure-Python fallbacks.

Run: python3 benchmarks/bench_kernels.py [--repeat N] [--train-steps N]

Each kernel is timed in-process on training-sized inputs (best of N after a
warm-up call, so compilation is excluded) and checked for agreement. The last
section times whole training steps in two subprocesses, one with
DRMM_DISABLE_JIT=1.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from drmm import _jit, kernels


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def inputs(rng, bsz=32, k=20, n=3, c=4, hw=32):
    lo = rng.uniform(0.0, 0.6, size=(bsz, k, 2))
    boxes = np.concatenate([lo, lo + rng.uniform(0.1, 0.4, size=(bsz, k, 2))], axis=2)
    glo = rng.uniform(0.0, 0.6, size=(bsz, n, 2))
    gts = np.concatenate([glo, glo + rng.uniform(0.2, 0.4, size=(bsz, n, 2))], axis=2)
    return dict(
        rasters=rng.uniform(size=(bsz, hw, hw, 3)),
        boxes=boxes,
        gts=gts,
        cls=rng.integers(0, c, size=(bsz, n)),
        log_pi=np.log(rng.dirichlet(np.ones(k), size=bsz)),
        gamma=rng.uniform(0.05, 0.3, size=(bsz, k, 4)),
        logp=np.log(rng.dirichlet(np.ones(c), size=(bsz, k))),
        weight=rng.normal(size=(bsz, n, k)),
        flat=boxes[0],
        scores=rng.uniform(size=k),
        cost=rng.uniform(size=(k, k)),
    )


def kernel_table(repeat):
    d = inputs(np.random.default_rng(0))
    cases = [
        ("iou_matrix 20x20", lambda f: f(d["flat"], d["flat"]),
         kernels._iou_matrix_jit, kernels._iou_matrix_np),
        ("crop B=32 K=20 4x4 s=4", lambda f: f(d["rasters"], d["boxes"], 4, 4),
         kernels._crop_jit, kernels._crop_np),
        ("component_loglik B=32", lambda f: f(d["gts"], d["cls"], d["log_pi"], d["boxes"], d["gamma"], d["logp"]),
         kernels._component_loglik_jit, kernels._component_loglik_np),
        ("cauchy_grad B=32", lambda f: f(d["gts"], d["boxes"], d["gamma"], d["weight"]),
         kernels._cauchy_grad_jit, kernels._cauchy_grad_np),
        ("nms order K=20", lambda f: f(d["flat"], d["scores"], 0.5),
         kernels._nms_order, getattr(kernels._nms_order, "py_func", kernels._nms_order)),
        ("hungarian 20x20", lambda f: f(d["cost"]),
         kernels._hungarian_square, getattr(kernels._hungarian_square, "py_func", kernels._hungarian_square)),
    ]
    print(f"{'kernel':<26}{'compiled':>12}{'fallback':>12}{'speedup':>10}  agree")
    for name, call, fast, slow in cases:
        a, b = call(fast), call(slow)
        agree = all(np.allclose(x, y, rtol=1e-12, atol=1e-12)
                    for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)))
        tf = best_of(lambda: call(fast), repeat)
        ts = best_of(lambda: call(slow), repeat)
        print(f"{name:<26}{tf * 1e3:>10.3f}ms{ts * 1e3:>10.3f}ms{ts / tf:>9.1f}x  {agree}")


STEP_SNIPPET = """
import time
from drmm import data, model
scenes = data.generate(0, 128)
cfg = model.ModelConfig()
model.train(scenes, cfg, model.TrainConfig(steps=2))
t = time.perf_counter()
model.train(scenes, cfg, model.TrainConfig(steps={steps}))
print((time.perf_counter() - t) / {steps})
"""


def step_table(steps):
    print(f"\ntraining step (B=32, K=20, 2 stages), mean of {steps} steps")
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, DRMM_DISABLE_JIT=flag)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                             capture_output=True, text=True, check=True)
        print(f"  {label:<6}{float(out.stdout.strip()) * 1e3:8.2f} ms/step")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--train-steps", type=int, default=50)
    args = ap.parse_args()
    if not _jit.USE_JIT:
        print("numba disabled (DRMM_DISABLE_JIT set or numba missing): both columns run the fallback")
    kernel_table(args.repeat)
    if args.train_steps:
        step_table(args.train_steps)


if __name__ == "__main__":
    main()
