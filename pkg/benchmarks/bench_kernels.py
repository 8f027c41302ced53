"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from clbench import kernels


def cases(rng):
    daily = rng.standard_normal((3650, 32, 64))
    means = rng.standard_normal((365, 32, 64))
    stack = rng.standard_normal((500, 32, 64))
    mask = (rng.random(stack.shape) > 0.1).astype(np.uint8)
    members = rng.standard_normal((10, 200_000))
    truth = rng.standard_normal(200_000)
    u = rng.random(200_000)
    fields = rng.standard_normal((50, 32, 64))
    i0 = np.repeat(np.arange(31), 4)
    j0 = np.repeat(np.arange(64), 2)
    return {
        "trailing_mean": (daily, 7),
        "stencil_blend": (means, 0.44, 0.11, 0.027, True, False),
        "weighted_step_sums": (stack, np.cos(np.linspace(-1.5, 1.5, 32)), mask),
        "rank_counts": (members, truth, u),
        "bilinear_apply": (fields, i0, i0 + 1, rng.random(i0.size), j0, (j0 + 1) % 64, rng.random(j0.size)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=3, help="timing repetitions (best is reported)")
    args = ap.parse_args()
    backends = kernels.available_backends()
    args_by_kernel = cases(np.random.default_rng(0))
    names = sorted(backends)
    print(f"{'kernel':<20s}" + "".join(f"{n:>12s}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for kernel, kargs in args_by_kernel.items():
        times = {}
        for n in names:
            fn = getattr(backends[n], kernel)
            times[n] = min(timeit.repeat(lambda: fn(*kargs), number=1, repeat=args.repeat))
        row = f"{kernel:<20s}" + "".join(f"{times[n] * 1e3:>10.1f}ms" for n in names)
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
