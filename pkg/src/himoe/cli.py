"""Command-line driver: ``himoe {train,eval,heatmap,sweep,gen-data}``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .dataset import DatasetManifest, build_dataset


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file mirroring TrainConfig field-for-field")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    p.add_argument("--steps", type=int, help="override the number of training steps")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics for bitwise-reproducible runs")


def load_config(args):
    from .train import TrainConfig
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    return cfg


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_train(args) -> int:
    from .train import train
    cfg = load_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(cfg.dumps() + "\n")
    tr = train(cfg, out_dir=args.out, deterministic=args.deterministic, resume=args.resume, log=_log)
    print(f"trained {tr.step} steps -> {args.out / 'ckpt.bin'}")
    return 0


def _ckpt(args):
    from .train import Checkpoint
    path = args.ckpt or args.out / "ckpt.bin"
    return Checkpoint.load(path)


def cmd_eval(args) -> int:
    from .evaluate import evaluate_checkpoint, format_report
    from .train import deterministic_threads
    ck = _ckpt(args)
    manifest = DatasetManifest.load(args.manifest) if args.manifest else None
    seed = args.seed if args.seed is not None else ck.config.seed
    with deterministic_threads(args.deterministic):
        rep = evaluate_checkpoint(ck, manifest, n_trials=args.trials, seed=seed)
    text = format_report(rep)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_heatmap(args) -> int:
    from .evaluate import export_routing_heatmap
    ck = _ckpt(args)
    manifest = DatasetManifest.load(args.manifest) if args.manifest else None
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "heatmap.csv"
    export_routing_heatmap(ck, manifest, path, seed=args.seed or 0)
    print(f"wrote {path}")
    return 0


def cmd_sweep(args) -> int:
    from .sweep import ablation_sweep, format_table
    cfg = load_config(args)
    grid = json.loads(args.grid.read_text()) if args.grid else {"variant": ["full", "dense"]}
    rows = ablation_sweep(cfg, grid, n_trials=args.trials, log=_log)
    text = format_table(rows)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "sweep.jsonl").write_text(text)
    for r in rows:
        print(f"{json.dumps(r['cell'], sort_keys=True)}  success={r['mean_success']:.3f}  "
              f"val_flow={r['mean_val_flow_loss']:.4f}  params={r['params']}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    manifest = DatasetManifest.load(args.manifest) if args.manifest else cfg.resolved_manifest()
    if args.seed is not None:
        manifest = replace(manifest, seed=args.seed)
    ds = build_dataset(manifest)
    args.out.mkdir(parents=True, exist_ok=True)
    ds.save(args.out / "dataset.bin")
    (args.out / "manifest.json").write_text(json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n")
    print(f"{len(ds)} records from {manifest.n_episodes} episodes -> {args.out / 'dataset.bin'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="himoe", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--resume", type=Path, help="continue from this checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--ckpt", type=Path, help="checkpoint (default: <out>/ckpt.bin)")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("heatmap", help="export expert routing frequencies as CSV")
    _common(p)
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--manifest", type=Path)
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("sweep", help="ablation grid, one train+eval per cell")
    _common(p)
    p.add_argument("--grid", type=Path, help='JSON, e.g. {"variant": ["full", "dense"], "top_k": [1, 2]}')
    p.add_argument("--trials", type=int, default=10)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("gen-data", help="generate and serialize a demonstration dataset")
    _common(p)
    p.add_argument("--manifest", type=Path)
    p.set_defaults(fn=cmd_gen_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
