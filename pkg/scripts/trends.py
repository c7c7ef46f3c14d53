#!/usr/bin/env python3
"""zo_fo stationarity across Q and across the client share d_c of a 64-dim model.

By default both sides use the step sqrt(Q / (d_c T L)). Pass --fixed-step to
hold the steps constant instead; the Q trend then shows the variance
reduction alone.
"""

import argparse
import sys

from hosl.experiments import dc_trend, q_trend


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--fixed-step", type=float, default=None, metavar="LR")
    args = p.parse_args()

    kw = dict(T=args.iters, lr=args.fixed_step)
    seeds = range(args.seeds)
    print("Q    stationarity   (d_c = 16)")
    for q, v in q_trend(seeds, (1, 5, 10), **kw).items():
        print(f"{q:<4} {v:.4f}")
    print("\nd_c  stationarity   (Q = 10)")
    for k, v in dc_trend(seeds, (8, 16, 32), **kw).items():
        print(f"{k:<4} {v:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
