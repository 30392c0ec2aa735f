"""Compiled vs numpy kernels on evaluation-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from solidmark import _kernels_py as py

try:
    from solidmark import _kernels as cy
except ImportError:
    cy = None


def cases(rng):
    a, b = rng.random((16, 3 * 32 * 32)), rng.random((300, 3 * 32 * 32))
    pa, pb = rng.random((1, 16, 192)), rng.random((300, 16, 192))
    x = rng.random((64, 3, 32, 32))
    m = np.zeros((32, 32))
    m[:4], m[-4:], m[:, :4], m[:, -4:] = 1, 1, 1, 1
    v, t = rng.random(100_000), np.array([0.1, 0.05, 0.005])
    return {
        "pairwise_l2 16x300": lambda k: k.pairwise_l2(a, b),
        "patched corresponding 1x300": lambda k: k.patched_pairwise(pa, pb, 0),
        "patched best_match 1x300": lambda k: k.patched_pairwise(pa, pb, 1),
        "masked_channel_means 64": lambda k: k.masked_channel_means(x, m),
        "count_at_most 1e5": lambda k: k.count_at_most(v, t),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--number", type=int, default=10)
    args = p.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=args.number, repeat=args.repeat)) / args.number
        if cy is None:
            print(f"{name:32s} {t_py * 1e3:10.3f} {'n/a':>10s}")
            continue
        t_cy = min(timeit.repeat(lambda: fn(cy), number=args.number, repeat=args.repeat)) / args.number
        print(f"{name:32s} {t_py * 1e3:10.3f} {t_cy * 1e3:10.3f} {t_py / t_cy:8.2f}")


if __name__ == "__main__":
    main()
