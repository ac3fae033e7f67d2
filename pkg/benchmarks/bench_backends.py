"""Compiled versus pure-Python iteration speed for the L-BFGS family.

Usage: python3 benchmarks/bench_backends.py [--samples N] [--dim n] [--iters K]
"""

import argparse

from irqn.cli import bench
from irqn.optimizers import LBFGS_FAMILY


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--dim", type=int, default=50)
    p.add_argument("--iters", type=int, default=20000)
    p.add_argument("--m", type=int, default=5)
    args = p.parse_args()
    print(f"{'algorithm':<10} {'python s/it':>12} {'compiled s/it':>14} {'speedup':>8} {'max |dx|':>9}")
    for algo in LBFGS_FAMILY:
        r = bench(args.samples, args.dim, args.iters, args.m, algo)
        if "compiled_s_per_iter" not in r:
            print(f"{algo:<10} {r['python_s_per_iter']:>12.3e}  (compiled backend unavailable)")
            continue
        print(f"{algo:<10} {r['python_s_per_iter']:>12.3e} {r['compiled_s_per_iter']:>14.3e} "
              f"{r['speedup']:>8.1f} {r['max_abs_diff']:>9.1e}")


if __name__ == "__main__":
    main()
