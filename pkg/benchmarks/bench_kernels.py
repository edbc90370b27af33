"""Time the compiled geometry kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--size 256] [--repeats 5]
"""
import argparse
import timeit

import numpy as np

from carime import kernels
from carime.geometry import border_anchors, solve_tps


def cases(size, rng):
    img = rng.uniform(-1, 1, (size, size, 3))
    residual = rng.normal(0, 0.05, (size, size, 2))
    ctrl = np.vstack([rng.uniform(0.2, 0.8, (17, 2)) * size, border_anchors(size, size)]) / size
    weights, affine = solve_tps(ctrl, rng.normal(0, 5, (len(ctrl), 2)))
    return {
        "bilinear_warp": lambda b: kernels.bilinear_warp(img, residual, backend=b),
        "tps_dense": lambda b: kernels.tps_dense(ctrl, weights, affine, size, size, size, backend=b),
        "degree": lambda b: kernels.mean_displacement_norm(residual, size / 2, size / 2, backend=b),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"default backend: {kernels.BACKEND}; image {args.size}x{args.size}")
    print(f"{'kernel':<16}" + "".join(f"{b + ' (ms)':>16}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases(args.size, np.random.default_rng(0)).items():
        times = {}
        for b in backends:
            fn(b)
            times[b] = min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeats)) * 1e3
        speed = times["numpy"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:<16}" + "".join(f"{times[b]:>16.3f}" for b in backends) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
