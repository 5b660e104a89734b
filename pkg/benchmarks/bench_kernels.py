"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--size 64] [--repeat 5] [--model]

Kernel rows call both implementations in-process. ``--model`` also times one
training step of the full network under each ``HSEG_BACKEND`` value, each in a
fresh interpreter since the backend is fixed at import.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from hseg.kernels import _numba_impl, _numpy_impl

MODEL_STEP = """
import time, numpy as np
from hseg import build_model, synth_vessels
from hseg.train import TrainConfig, loss_and_grads
m = build_model(seed=0)
s = synth_vessels(0, {size}, 2)
x = np.concatenate([a.image for a in s]); y = np.concatenate([a.mask for a in s])
cfg = TrainConfig()
best = float("inf")
for _ in range({repeat}):
    t = time.perf_counter()
    out = m.forward(x)
    _, g = loss_and_grads(out, y, cfg)
    m.zero_grad(); m.backward(g)
    best = min(best, time.perf_counter() - t)
print(best)
"""


def best_of(fn, repeat):
    fn()  # warm-up, also triggers the JIT
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(size, rng):
    n, c, k, stride = 2, 32, 5, 1
    pad = k // 2
    x = rng.standard_normal((n, c, size, size)).astype(np.float32)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    w = rng.standard_normal((c, k, k)).astype(np.float32)
    g = rng.standard_normal((n, c, size, size)).astype(np.float32)

    kd = 3
    xd = x[:, :16]
    off = (rng.standard_normal((n, 2 * kd * kd, size, size)) * 1.5).astype(np.float32)
    mask = rng.random((n, kd * kd, size, size)).astype(np.float32)
    gcols = rng.standard_normal((n, 16, kd * kd, size, size)).astype(np.float32)
    return {
        f"depthwise_forward k={k} C={c}": lambda impl: impl.depthwise_forward(xp, w, stride, size, size),
        f"depthwise_backward k={k} C={c}": lambda impl: impl.depthwise_backward(xp, w, g, stride),
        f"deform_im2col k={kd} C=16": lambda impl: impl.deform_im2col(xd, off, mask, kd, 1, 1),
        f"deform_col2im k={kd} C=16": lambda impl: impl.deform_col2im(xd, off, mask, gcols, kd, 1, 1),
    }


def _as_tuple(r):
    return r if isinstance(r, tuple) else (r,)


def model_step(backend, size, repeat):
    env = dict(os.environ, HSEG_BACKEND=backend)
    code = MODEL_STEP.format(size=size, repeat=repeat)
    out = subprocess.run([sys.executable, "-c", code], env=env, check=True, capture_output=True, text=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--model", action="store_true", help="also time a full training step per backend")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, call in kernel_cases(args.size, rng).items():
        for a, b in zip(_as_tuple(call(_numpy_impl)), _as_tuple(call(_numba_impl))):
            # float32 sums in a different order, so compare against the output scale
            assert np.max(np.abs(a - b)) <= 1e-5 * np.max(np.abs(b)), f"{name}: backends disagree"
        t_np = best_of(lambda: call(_numpy_impl), args.repeat)
        t_nb = best_of(lambda: call(_numba_impl), args.repeat)
        print(f"{name:34s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:7.1f}x")

    if args.model:
        t_np = model_step("numpy", args.size, args.repeat)
        t_nb = model_step("numba", args.size, args.repeat)
        name = f"train step, batch 2, {args.size}px"
        print(f"{name:34s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
