"""Run the ablation grid (layer layouts, expert counts, regularizers) and print a table."""

import argparse
import json
from pathlib import Path

from himoe.experiments import cotrain_config
from himoe.sweep import VARIANTS, ablation_sweep, format_table


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--grid", type=str, default=json.dumps({"variant": list(VARIANTS)}),
                    help="JSON grid over n_experts, top_k, variant, reg")
    ap.add_argument("--out", type=Path, default=Path("runs/ablation.jsonl"))
    args = ap.parse_args()
    base = cotrain_config(seed=args.seed, steps=args.steps)
    rows = ablation_sweep(base, json.loads(args.grid), n_trials=args.trials, log=print)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(format_table(rows))
    print(f"{'cell':40s} {'params':>8s} {'success':>8s} {'val_flow':>9s}")
    for r in rows:
        print(f"{json.dumps(r['cell'], sort_keys=True):40s} {r['params']:8d} "
              f"{r['mean_success']:8.3f} {r['mean_val_flow_loss']:9.4f}")


if __name__ == "__main__":
    main()
