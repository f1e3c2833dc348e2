"""Run every budget-matched ablation on the noisy synthetic task.

Writes ablation_<kind>.csv (one row per variant) and ablation_<kind>_runs.csv
(one row per variant and seed) under --out.

    python scripts/run_ablations.py --out runs/ablations --seeds 0,1,2
"""

import argparse
from pathlib import Path

from microdense.ablation import ABLATIONS, run_ablation, summarize
from microdense.cli import resolve_data
from microdense.config import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/ablation-synthetic.json")
    ap.add_argument("--data", default="synthetic")
    ap.add_argument("--budget", type=int, default=50_000)
    ap.add_argument("--kinds", default=",".join(ABLATIONS))
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="runs/ablations")
    args = ap.parse_args()

    cfg = load_config(args.config)
    train_data, test_data = resolve_data(args.data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]
    for kind in args.kinds.split(","):
        rows = run_ablation(kind, args.budget, train_data, test_data, cfg.train, seeds,
                            out_dir=out, **(cfg.ablation or {}))
        print(f"== {kind}")
        params = {r["variant"]: r["params"] for r in rows}
        for variant, acc in summarize(rows).items():
            print(f"  {variant:<12} params={params[variant]:>7,} mean_test_acc={acc:.4f}")


if __name__ == "__main__":
    main()
