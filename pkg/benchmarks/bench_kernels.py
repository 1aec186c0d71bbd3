"""Compare the compiled im2col/col2im kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per (kernel, shape, dtype) with the best-of-N time of each
backend and the speedup, after checking that both give identical bytes.
"""
import argparse
import sys
import timeit

import numpy as np

from amcn import _kernels_py

try:
    from amcn._ext import _kernels as compiled
except ImportError:
    compiled = None

# (B, C, H, W) shapes met while training the desk-scale model, plus one small case
SHAPES = [(8, 1, 32, 32), (8, 16, 32, 32), (8, 48, 32, 32), (2, 8, 16, 16)]


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--k", type=int, default=3)
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled kernels are not built; only the fallback is available")
        return 1
    rng = np.random.default_rng(0)
    k = args.k
    print(f"{'kernel':<7} {'shape':<16} {'dtype':<8} {'cython ms':>10} {'python ms':>10} {'speedup':>8}")
    for dtype in (np.float32, np.float64):
        for B, C, H, W in SHAPES:
            x = rng.standard_normal((B, C, H, W)).astype(dtype)
            cols = rng.standard_normal((B * H * W, k * k * C)).astype(dtype)
            cases = (("im2col", lambda m: m.im2col(x, k)),
                     ("col2im", lambda m: m.col2im(cols, B, C, H, W, k)))
            for name, call in cases:
                if call(compiled).tobytes() != call(_kernels_py).tobytes():
                    print(f"{name}: backends disagree for {(B, C, H, W)} {np.dtype(dtype).name}")
                    return 1
                tc = best(lambda: call(compiled), args.repeat) * 1e3
                tp = best(lambda: call(_kernels_py), args.repeat) * 1e3
                shape = "x".join(map(str, (B, C, H, W)))
                print(f"{name:<7} {shape:<16} {np.dtype(dtype).name:<8} {tc:10.3f} {tp:10.3f} {tp / tc:8.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
