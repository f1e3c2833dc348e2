"""Scan the compression ratio r_a and report both CIFAR model sizes.

A value is feasible when 30a64 lands within 10% of 0.7M and 60a115 within
10% of 4.0M at the same time.

    python scripts/calibrate_ra.py --lo 0.15 --hi 0.30 --step 0.001
"""

import argparse
from dataclasses import replace

import numpy as np

from microdense.config import load_config
from microdense.planner import plan_network

TARGETS = (("configs/30a64.json", 0.7e6), ("configs/60a115.json", 4.0e6))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lo", type=float, default=0.15)
    ap.add_argument("--hi", type=float, default=0.30)
    ap.add_argument("--step", type=float, default=0.001)
    ap.add_argument("--tol", type=float, default=0.10)
    args = ap.parse_args()

    archs = [(load_config(path).arch, target) for path, target in TARGETS]
    feasible = []
    for ra in np.arange(args.lo, args.hi + args.step / 2, args.step):
        ra = round(float(ra), 6)
        devs = []
        for arch, target in archs:
            total = plan_network(replace(arch, ra=ra)).total_params
            devs.append((total, total / target - 1))
        ok = all(abs(d) <= args.tol for _, d in devs)
        if ok:
            feasible.append(ra)
        cols = "  ".join(f"{t:>9,} ({d:+.1%})" for t, d in devs)
        print(f"ra={ra:<7g} {cols}  {'ok' if ok else ''}")
    if feasible:
        print(f"feasible window: [{min(feasible):g}, {max(feasible):g}]")
    else:
        print("no ratio satisfies both targets")


if __name__ == "__main__":
    main()
