#!/usr/bin/env python3
"""Sweep GEMM sizes across the three kernels and emit one CSV table.

    python3 scripts/bench_sweep.py --sizes 256 512 1024 --reps 5
"""

import argparse
import sys

from bitquant.bench import CSV_HEADER, bench_gemm, bench_to_csv


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", type=int, nargs="+", default=[256, 512, 1024])
    parser.add_argument("--reps", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    print(CSV_HEADER)
    for size in args.sizes:
        reports = bench_gemm((size, size, size), reps=args.reps, seed=args.seed)
        body = bench_to_csv(reports).splitlines()[1:]
        print("\n".join(body), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
