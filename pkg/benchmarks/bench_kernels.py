"""Compare the compiled kernel extension against the numpy fallback.

Runs the conv/pool data-movement kernels and a full training step on
representative shapes, printing a side-by-side table.  Usage::

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from ftk import _kernels_np
from ftk import kernels
from ftk._mem import enable_heap_reuse


def timeit(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    cases = [
        ("conv3x3 64x64x32 b32", (32, 32, 66, 66), 3, 1),
        ("conv3x3 16x16x128 b32", (32, 128, 18, 18), 3, 1),
    ]
    rows = []
    for name, shape, k, stride in cases:
        xp = rng.random(shape).astype(np.float32)
        n, c, hp, wp = shape
        col = kernels.im2col(xp, k, k, stride)
        gcol = np.ascontiguousarray(rng.random(col.shape).astype(np.float32))
        for label, mod in (("cython", kernels), ("numpy", _kernels_np)):
            if label == "cython" and kernels.BACKEND != "cython":
                continue
            t_im = timeit(lambda m=mod: m.im2col(xp, k, k, stride), repeat)
            t_col = timeit(lambda m=mod: m.col2im(gcol, n, c, hp, wp, k, k, stride), repeat)
            rows.append((f"{name} [{label}]", t_im, t_col))
        x4 = rng.random((n, c, hp - 2, wp - 2)).astype(np.float32)
        out, idx = kernels.maxpool_argmax(x4, 2, 2)
        g = np.ascontiguousarray(rng.random(out.shape).astype(np.float32))
        for label, mod in (("cython", kernels), ("numpy", _kernels_np)):
            if label == "cython" and kernels.BACKEND != "cython":
                continue
            t_mp = timeit(lambda m=mod: m.maxpool_argmax(x4, 2, 2), repeat)
            t_sc = timeit(lambda m=mod: m.maxpool_scatter(g, idx, *x4.shape[:2], *x4.shape[2:]), repeat)
            rows.append((f"{name.replace('conv3x3', 'maxpool2')} [{label}]", t_mp, t_sc))
    print(f"{'case':44s} {'forward ms':>11s} {'backward ms':>12s}")
    for name, fwd, bwd in rows:
        print(f"{name:44s} {fwd:11.1f} {bwd:12.1f}")


def bench_train_step(repeat):
    from ftk.layers import nll_loss
    from ftk.models import ModelConfig, build_model
    from ftk.optim import Adam
    from ftk.tensor import Tensor

    rng = np.random.default_rng(0)
    x = rng.random((32, 3, 64, 64)).astype(np.float32)
    labels = np.arange(32) % 10

    model = build_model(ModelConfig(arch="mini_vgg"), init_seed=0)
    opt = Adam(model.tree, lr=1e-3)

    def step():
        opt.zero_grad()
        out = model.forward(Tensor(x), "train", dropout_seed=1)
        nll_loss(out, labels).backward()
        opt.step()

    ms = timeit(step, repeat)
    print(f"\nmini_vgg train step, batch 32, backend={kernels.BACKEND}: {ms:.0f} ms "
          f"({32 / ms * 1e3:.1f} img/s)")


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    enable_heap_reuse()
    print(f"active backend: {kernels.BACKEND}")
    bench_kernels(args.repeat)
    bench_train_step(args.repeat)
    if kernels.BACKEND != "cython":
        print("note: compiled extension not built; only the numpy fallback was timed. "
              "Set FTK_KERNELS=numpy with a built extension to force the fallback instead.")
