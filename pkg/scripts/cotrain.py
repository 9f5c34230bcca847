"""Co-train HiMoE and the dense baseline on the joint+EEF mixture over several seeds."""

import argparse
import json
from pathlib import Path

from himoe.experiments import cotrain_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--out", type=Path, default=Path("runs/cotrain"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        for variant in ("full", "dense"):
            r = cotrain_run(seed=seed, steps=args.steps, variant=variant, n_trials=args.trials)
            row = {k: r[k] for k in ("variant", "seed", "params", "initial_flow", "final_flow")}
            row["report"] = r["report"]
            if "js_trained" in r:
                row["js_untrained"], row["js_trained"] = r["js_untrained"], r["js_trained"]
                (args.out / f"heatmap_seed{seed}.csv").write_text(r["routing"].to_csv())
            print(json.dumps({k: v for k, v in row.items() if k != "report"}), flush=True)
            rows.append(row)
    (args.out / "results.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    for variant in ("full", "dense"):
        sel = [r["report"]["mean_success"] for r in rows if r["variant"] == variant]
        print(f"{variant:6s} mean success {sum(sel) / len(sel):.3f}")


if __name__ == "__main__":
    main()
