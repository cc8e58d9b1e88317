"""Compiled vs pure-Python segmenter kernels.

    python3 benchmarks/bench_kernels.py [--frames 5000] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from atomicvla.kernels import _pure

try:
    from atomicvla.kernels import _native
except ImportError:
    _native = None


def random_walk(n, seed=0):
    rng = np.random.default_rng(seed)
    arr = np.cumsum(rng.normal(0, 0.01, (n, 5)), axis=0)
    arr[:, 4] = (rng.random(n) > 0.5).astype(float)
    return np.ascontiguousarray(arr)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--frames", type=int, default=5000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    arr = random_walk(args.frames)
    codes = _pure.classify_windows(arr, 5, 0.03, 0.05, 0.1)
    starts, ends, rc = _pure.runs(codes)
    cases = {
        "classify_windows": lambda m: m.classify_windows(arr, 5, 0.03, 0.05, 0.1),
        "runs": lambda m: m.runs(codes),
        "merge_short_runs": lambda m: m.merge_short_runs(starts, ends, rc, 5),
    }
    print(f"{'kernel':<18} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, fn in cases.items():
        tp = min(timeit.repeat(lambda: fn(_pure), number=1, repeat=args.repeat)) * 1e3
        if _native is None:
            print(f"{name:<18} {tp:>10.2f} {'n/a':>10} {'n/a':>8}")
            continue
        tc = min(timeit.repeat(lambda: fn(_native), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<18} {tp:>10.2f} {tc:>10.2f} {tp / tc:>7.1f}x")


if __name__ == "__main__":
    main()
