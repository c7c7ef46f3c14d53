#!/usr/bin/env python3
"""Iterations to reach 1% of the initial loss for each mode, with tuned steps.

Steps are tuned on seeds 100-102 and evaluated on fresh seeds.
"""

import argparse
import csv
import logging
import sys

from hosl.experiments import rate_ordering


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--q", type=int, default=4)
    p.add_argument("--budget", type=int, default=1500, help="iteration cap per run")
    p.add_argument("--csv", help="write per-seed iterations here")
    p.add_argument("-v", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.v else logging.WARNING, format="%(message)s")

    res = rate_ordering(seeds=range(args.seeds), budget=args.budget, Q=args.q)
    print(f"{'mode':<7}{'lr_client':>10}{'lr_server':>10}{'mean iters':>12}")
    for r in res.values():
        print(f"{r.mode:<7}{r.lr[0]:>10g}{r.lr[1]:>10g}{r.mean:>12.1f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "seed", "iterations"])
            for r in res.values():
                w.writerows([r.mode, s, it] for s, it in enumerate(r.iterations))
    return 0


if __name__ == "__main__":
    sys.exit(main())
