#!/usr/bin/env python3
"""Sweep ternary-kernel throughput against the dense f32 oracle across
square weight sizes and print a small table."""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ternmm.kernels import KernelPlan, bench_kernels
from ternmm.quant import pack_matrix


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[256, 512, 1024, 2048])
    ap.add_argument("--m", type=int, default=16)
    ap.add_argument("--iters", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    plan = KernelPlan(threads=args.threads)
    print(f"{'OxK':>12} {'tern Melem/s':>14} {'dense Melem/s':>14} {'ratio':>7} {'maxdiff':>9}")
    for n in args.sizes:
        trits = rng.integers(-1, 2, (n, n)).astype(np.int8)
        packed = pack_matrix(trits, 0.05)
        x = rng.normal(0, 1, (args.m, n)).astype(np.float32)
        stats = bench_kernels(packed, x, iters=args.iters, plan=plan)
        print(
            f"{n:>5}x{n:<6} {stats['ternary_elements_per_s'] / 1e6:>14.1f} "
            f"{stats['dense_elements_per_s'] / 1e6:>14.1f} "
            f"{stats['speed_ratio']:>7.2f} {stats['max_abs_diff']:>9.2e}"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
