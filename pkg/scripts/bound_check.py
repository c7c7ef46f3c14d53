#!/usr/bin/env python3
"""Measured stationarity against the theoretical bound for zo_fo runs."""

import argparse
import sys

from hosl.experiments import bound_run


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--q", type=int, default=4)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--batch", type=int, default=0, help="0 = full batch")
    args = p.parse_args()

    violated = 0
    for seed in range(args.seeds):
        rep = bound_run(seed, Q=args.q, T=args.iters, batch_size=args.batch)
        violated += rep.violated
        print(f"seed {seed}: {rep}")
    return 1 if violated else 0


if __name__ == "__main__":
    sys.exit(main())
