"""Paired runs that switch one regularizer on and off at a fixed seed."""

import argparse
import json

from himoe.experiments import regularizer_pair


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=400)
    args = ap.parse_args()
    hb = regularizer_pair("hb", (0.0, 0.1), seed=args.seed, steps=args.steps)
    print(json.dumps({"max_hb_frequency": {str(k): v for k, v in hb.items()}}))
    as_ = regularizer_pair("as", (0.0, 0.02), seed=args.seed, steps=args.steps)
    print(json.dumps({"tail_as_reg": {str(k): v for k, v in as_.items()}}))


if __name__ == "__main__":
    main()
