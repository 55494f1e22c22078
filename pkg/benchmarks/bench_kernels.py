"""Benchmark the compiled kernels against the pure-numpy fallback.

Runs the same estimator workloads once per backend and reports samples
per second plus the speedup. The general (gram-mode) paths consume the
identical random stream on both backends, so their timing difference is
purely the accumulation kernel; the diagonal fast paths additionally
fuse normal generation into the compiled scan.

Usage:
    python3 benchmarks/bench_kernels.py [--m N] [--l L] [--beta B]
                                        [--repeat R]
"""

import argparse
import math
import time

import numpy as np

from bias_lab import ExperimentConfig, GramModel, engine


def _time(fn, repeat):
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--m", type=int, default=2_000_000,
                    help="samples per run (default 2e6)")
    ap.add_argument("--l", type=int, default=8,
                    help="number of templates (default 8)")
    ap.add_argument("--diag-l", type=int, default=256,
                    help="templates for the diagonal paths (default 256)")
    ap.add_argument("--beta", type=float, default=1.0,
                    help="softmax sharpness for the soft runs")
    ap.add_argument("--repeat", type=int, default=3,
                    help="timing repetitions, best is kept")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    g = GramModel.from_correlation(np.eye(args.l))

    def cfg(backend, beta=math.inf, m=args.m):
        return ExperimentConfig(m=m, seed=args.seed, mode="gram",
                                beta=beta, backend=backend)

    jobs = [
        ("hard gram L=%d" % args.l,
         lambda b: engine.hard_assign(g, cfg(b))),
        ("soft gram L=%d" % args.l,
         lambda b: engine.soft_assign(g, cfg(b, beta=args.beta))),
        ("hard diag L=%d" % args.diag_l,
         lambda b: engine.hard_assign_diag(args.diag_l, cfg(b))),
        ("soft diag L=%d" % args.diag_l,
         lambda b: engine.soft_assign_diag(args.diag_l,
                                           cfg(b, beta=args.beta))),
    ]

    # warm the compiled paths so timings exclude JIT compilation
    for _, job in jobs:
        job("numba")

    print(f"m = {args.m:,} samples, best of {args.repeat}")
    print(f"{'workload':<18} {'numba':>12} {'numpy':>12} {'speedup':>9}")
    for name, job in jobs:
        t_nb = _time(lambda: job("numba"), args.repeat)
        t_np = _time(lambda: job("numpy"), args.repeat)
        rate_nb = args.m / t_nb
        rate_np = args.m / t_np
        print(f"{name:<18} {rate_nb:>10.3g}/s {rate_np:>10.3g}/s "
              f"{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
