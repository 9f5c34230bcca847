"""Ablation grid: one train + evaluate per cell, all cells at the same seed."""

from __future__ import annotations

import itertools
import json
from dataclasses import replace

from .evaluate import evaluate
from .model import ExpertStackConfig, hierarchical_layout
from .train import TrainConfig, train

VARIANTS = ("full", "dense", "full_hb", "no_as", "no_hb", "single_moe")


def variant_model(base: ExpertStackConfig, variant: str) -> ExpertStackConfig:
    """Layer layout for one ablation row.

    dense       every layer dense, hidden width K * d_ff (same active FFN size)
    full_hb     every layer an HB-MoE
    no_as       AS boundary layers become dense blocks
    no_hb       HB layers become dense blocks
    single_moe  one generic MoE layer (both regularizers) first, rest dense
    """
    d = base.depth
    layout = hierarchical_layout(d)
    if variant == "full":
        return replace(base, layer_kinds=layout, check_layout=True)
    if variant == "dense":
        return base.with_layout(("Dense",) * d, dense_ff=base.top_k * base.d_ff)
    if variant == "full_hb":
        return base.with_layout(("HBMoE",) * d)
    if variant == "no_as":
        return base.with_layout(tuple("Dense" if k == "ASMoE" else k for k in layout))
    if variant == "no_hb":
        return base.with_layout(tuple("Dense" if k == "HBMoE" else k for k in layout))
    if variant == "single_moe":
        return base.with_layout(("MoE",) + ("Dense",) * (d - 1))
    raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")


def expand_grid(grid: dict) -> list:
    """Cartesian product of ``grid`` values in key order; keys:
    n_experts, top_k, variant, reg (bool)."""
    allowed = {"n_experts", "top_k", "variant", "reg"}
    bad = set(grid) - allowed
    if bad:
        raise ValueError(f"unknown grid axes {sorted(bad)}")
    for v in grid.get("variant", []):
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    keys = sorted(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def cell_config(base: TrainConfig, cell: dict) -> TrainConfig:
    m = base.model
    m = replace(m, n_experts=cell.get("n_experts", m.n_experts), top_k=cell.get("top_k", m.top_k))
    m = variant_model(m, cell.get("variant", "full"))
    cfg = replace(base, model=m)
    if not cell.get("reg", True):
        cfg = replace(cfg, lambda_as=0.0, lambda_hb=0.0)
    return cfg


def run_cell(base: TrainConfig, cell: dict, n_trials: int = 10, deterministic: bool = True) -> dict:
    cfg = cell_config(base, cell)
    tr = train(cfg, deterministic=deterministic)
    rep = evaluate(tr.model, tr.data.stats, tr.manifest, n_trials=n_trials, seed=cfg.seed)
    return {"cell": cell, "config": cfg.to_dict(), "params": tr.model.num_parameters(),
            "mean_success": rep["mean_success"], "mean_val_flow_loss": rep["mean_val_flow_loss"],
            "report": rep}


def ablation_sweep(base: TrainConfig, grid: dict, n_trials: int = 10, log=None) -> list:
    rows = []
    for cell in expand_grid(grid):
        if log:
            log(f"cell {cell}")
        rows.append(run_cell(base, cell, n_trials))
    return rows


def format_table(rows: list) -> str:
    """One JSON object per line: the cell, its full config, and its scores."""
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
