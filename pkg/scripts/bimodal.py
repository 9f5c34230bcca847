"""Fit an unconditional flow model to a two-mode 1-D target and report W1."""

import argparse
import json
from dataclasses import replace

from himoe.experiments import BimodalConfig, sample_bimodal, train_bimodal, w1_to_mixture


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--samples", type=int, default=1000)
    args = ap.parse_args()
    cfg = replace(BimodalConfig(), seed=args.seed, steps=args.steps,
                  decay_end_step=max(args.steps, BimodalConfig.warmup_steps + 1))
    model, losses = train_bimodal(cfg, log=print)
    s = sample_bimodal(model, args.samples, seed=args.seed)
    print(json.dumps({"w1": w1_to_mixture(s, cfg.modes, cfg.std), "final_flow": losses[-1],
                      "sample_mean": float(s.mean())}))


if __name__ == "__main__":
    main()
