"""Evaluation: validation flow loss, action error against the scripted expert,
closed-loop rollout success, and expert-routing statistics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import jensenshannon

from . import codec
from . import tensor as T
from .codec import ActionSpace, Kind
from .context import ContextInput
from .dataset import Dataset, DatasetManifest, build_dataset
from .embodiments import RolloutObs, get_embodiment, rollout_eval
from .model import HiMoE
from .objectives import FlowSample, flow_loss
from .sampler import IntegratorConfig, sample_chunk
from .tensor import Tensor
from .train import Checkpoint

HEATMAP_HEADER = ("layer", "layer_kind", "expert", "group", "frequency")


class ModelPolicy:
    """Wrap a trained model as a rollout policy: raw state in, raw action chunk out."""

    def __init__(self, model: HiMoE, stats: dict, seed: int = 0,
                 integrator: IntegratorConfig = IntegratorConfig()):
        self.model = model
        self.stats = stats
        self.rng = np.random.default_rng(seed)
        self.integrator = integrator

    def _scope(self, emb_id: str) -> dict:
        if "global" in self.stats:
            return self.stats["global"]
        if emb_id not in self.stats:
            raise ValueError(f"no normalization statistics for embodiment {emb_id!r}")
        return self.stats[emb_id]

    def __call__(self, ro: RolloutObs) -> np.ndarray:
        st = self._scope(ro.emb.id)
        uv = codec.normalize_state(codec.encode(ro.raw_states, ro.emb, Kind.STATE), st["state"])
        state = np.concatenate([uv.values, uv.mask.astype(np.float64)], axis=-1)
        ctx = ContextInput(ro.obs, ro.stream_mask, ro.instr)
        a = sample_chunk(self.model, state, ctx, self.rng, self.integrator)
        return codec.decode(st["action"].invert(a), ro.emb)


@dataclass
class EmbodimentReport:
    val_flow_loss: float
    action_mse: float
    success: float


def _check_compatible(model: HiMoE, data: Dataset) -> None:
    if data.manifest.horizon != model.cfg.horizon:
        raise ValueError(f"dataset horizon {data.manifest.horizon} != model horizon {model.cfg.horizon}")
    if model.ctx_cfg.feat_dim != data.records["obs"].shape[-1]:
        raise ValueError("observation feature width does not match the context encoder")


def validation_flow_loss(model: HiMoE, data: Dataset, idx: np.ndarray, seed: int = 0,
                         batch: int = 256) -> float:
    rng = np.random.default_rng(seed)
    total, n = 0.0, 0
    with T.no_grad():
        for s in range(0, len(idx), batch):
            b = data.batch(idx[s:s + batch])
            fs = FlowSample.draw(b.actions, rng)
            out = model(b.state, Tensor(fs.A_tau), fs.tau, model.context.encode(b.ctx))
            total += flow_loss(out.v_pred, fs.eps, fs.A).item() * len(b.state)
            n += len(b.state)
    return total / n


def action_mse(model: HiMoE, data: Dataset, idx: np.ndarray, seed: int = 0,
               integrator: IntegratorConfig = IntegratorConfig(), batch: int = 256) -> float:
    """Mean squared error of sampled normalized chunks against the expert's, on mapped dims."""
    rng = np.random.default_rng(seed)
    errs = []
    for s in range(0, len(idx), batch):
        b = data.batch(idx[s:s + batch])
        pred = sample_chunk(model, b.state, b.ctx, rng, integrator)
        for k in np.unique(b.emb):
            mask = data.embodiments[k].mapped_mask(Kind.ACTION)
            sel = b.emb == k
            errs.append(((pred[sel] - b.actions[sel])[..., mask] ** 2).reshape(-1))
    return float(np.mean(np.concatenate(errs)))


def evaluate(model: HiMoE, stats: dict, manifest: DatasetManifest, n_trials: int = 20,
             seed: int = 0, n_val_episodes: int | None = None, max_records: int = 256,
             integrator: IntegratorConfig = IntegratorConfig()) -> dict:
    """Per-embodiment validation flow loss, action MSE and rollout success."""
    val = build_dataset(manifest.validation(n_val_episodes), stats)
    _check_compatible(model, val)
    out = {}
    for emb in val.embodiments:
        idx = val.indices_for(emb.id)
        if len(idx) > max_records:
            idx = np.sort(np.random.default_rng(seed).choice(idx, max_records, replace=False))
        policy = ModelPolicy(model, stats, seed=seed, integrator=integrator)
        out[emb.id] = EmbodimentReport(
            val_flow_loss=validation_flow_loss(model, val, idx, seed),
            action_mse=action_mse(model, val, idx, seed, integrator),
            success=rollout_eval(policy, emb, n_trials, seed=seed + 17),
        )
    return make_report(out, n_trials, seed)


def make_report(per_emb: dict, n_trials: int, seed: int) -> dict:
    rows = {k: vars(v) if isinstance(v, EmbodimentReport) else dict(v) for k, v in per_emb.items()}
    return {"embodiments": rows,
            "mean_success": float(np.mean([r["success"] for r in rows.values()])),
            "mean_val_flow_loss": float(np.mean([r["val_flow_loss"] for r in rows.values()])),
            "n_trials": n_trials, "seed": seed}


def evaluate_checkpoint(ckpt: Checkpoint, manifest: DatasetManifest | None = None, **kw) -> dict:
    manifest = manifest or ckpt.manifest
    if "global" not in ckpt.norm_stats:
        missing = [e for e in manifest.embodiments if e not in ckpt.norm_stats]
        if missing:
            raise ValueError(f"checkpoint has no normalization statistics for {missing}")
    return evaluate(ckpt.build_model(), ckpt.norm_stats, manifest, **kw)


def format_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2)


def parse_report(text: str) -> dict:
    report = json.loads(text)
    for key in ("embodiments", "mean_success", "n_trials", "seed"):
        if key not in report:
            raise ValueError(f"report missing {key!r}")
    for emb, row in report["embodiments"].items():
        if set(row) != {"val_flow_loss", "action_mse", "success"}:
            raise ValueError(f"malformed row for {emb}")
    return report


# -- routing statistics ------------------------------------------------------

def group_labels(data: Dataset) -> dict:
    """group name -> record indices; groups are embodiments and action spaces."""
    groups = {}
    for emb in data.embodiments:
        groups[f"emb:{emb.id}"] = data.indices_for(emb.id)
    for space in ActionSpace:
        ids = [k for k, e in enumerate(data.embodiments) if e.action_space is space]
        sel = np.nonzero(np.isin(data.records["emb"], ids))[0]
        if len(sel):
            groups[f"space:{space.value}"] = sel
    return groups


@dataclass
class RoutingStats:
    """counts[layer][group] -> routed-assignment counts per expert."""

    layer_kinds: dict
    counts: dict
    n_experts: int

    def frequencies(self, layer: int, group: str) -> np.ndarray:
        c = self.counts[layer][group]
        return c / c.sum()

    def groups(self) -> list:
        first = next(iter(self.counts.values()))
        return list(first)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEATMAP_HEADER)
        for layer in sorted(self.counts):
            for group in self.counts[layer]:
                f = self.frequencies(layer, group)
                for e in range(self.n_experts):
                    w.writerow((layer, self.layer_kinds[layer], e, group, repr(float(f[e]))))
        return buf.getvalue()

    def js_divergence(self, group_a: str, group_b: str, kinds=("ASMoE",)) -> float:
        """Mean over layers of the given kinds of the base-2 JS divergence."""
        vals = [jensenshannon(self.frequencies(l, group_a), self.frequencies(l, group_b), base=2) ** 2
                for l in sorted(self.counts) if self.layer_kinds[l] in kinds]
        if not vals:
            raise ValueError(f"no layers of kind {kinds}")
        return float(np.mean(vals))

    def max_frequency(self, kinds=("HBMoE",), group: str | None = None) -> float:
        """Largest single-expert share over layers of the given kinds (all records by default)."""
        out = 0.0
        for l in self.counts:
            if self.layer_kinds[l] not in kinds:
                continue
            c = self.counts[l][group] if group else sum(self.counts[l][g] for g in self.counts[l]
                                                         if g.startswith("emb:"))
            out = max(out, float((c / c.sum()).max()))
        return out


def routing_stats(model: HiMoE, data: Dataset, seed: int = 0, max_records: int = 1024,
                  batch: int = 256, tokens: str = "all") -> RoutingStats:
    """Count top-k assignments per (layer, group, expert) over up to
    ``max_records`` records at flow times drawn as in training.

    ``tokens="all"`` counts every token; ``"action"`` only the action tokens.
    """
    if tokens not in ("all", "action"):
        raise ValueError(f"tokens must be 'all' or 'action', got {tokens!r}")
    first = 2 if tokens == "action" else 0
    _check_compatible(model, data)
    rng = np.random.default_rng(seed)
    idx = np.arange(len(data))
    if len(idx) > max_records:
        idx = np.sort(rng.choice(idx, max_records, replace=False))
    groups = group_labels(data)
    n, u = model.cfg.n_experts, model.cfg.tokens
    kinds = {i: k for i, k in enumerate(model.cfg.layer_kinds) if k != "Dense"}
    counts = {l: {g: np.zeros(n, dtype=np.int64) for g in groups} for l in kinds}
    member = {g: np.isin(idx, sel) for g, sel in groups.items()}
    with T.no_grad():
        for s in range(0, len(idx), batch):
            part = idx[s:s + batch]
            b = data.batch(part)
            fs = FlowSample.draw(b.actions, rng)
            out = model(b.state, Tensor(fs.A_tau), fs.tau, model.context.encode(b.ctx))
            for rec in out.moe_records():
                assign = rec.gate.index.reshape(len(part), u, -1)[:, first:]
                for g, m in member.items():
                    chosen = assign[m[s:s + batch]].reshape(-1)
                    counts[rec.layer][g] += np.bincount(chosen, minlength=n)
    for l in counts:
        counts[l] = {g: c for g, c in counts[l].items() if c.sum() > 0}
    return RoutingStats(kinds, counts, n)


def parse_heatmap(text: str) -> list:
    """Read a heatmap CSV and check its schema and per-(layer, group) sums."""
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != HEATMAP_HEADER:
        raise ValueError(f"bad heatmap header {header}")
    rows, sums = [], {}
    for layer, kind, expert, group, freq in reader:
        f = float(freq)
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"frequency {f} outside [0, 1]")
        rows.append((int(layer), kind, int(expert), group, f))
        sums[(int(layer), group)] = sums.get((int(layer), group), 0.0) + f
    bad = {k: v for k, v in sums.items() if abs(v - 1.0) > 1e-6}
    if bad:
        raise ValueError(f"frequencies do not sum to 1 for {bad}")
    return rows


def export_routing_heatmap(ckpt: Checkpoint, manifest: DatasetManifest | None = None,
                           path=None, seed: int = 0) -> RoutingStats:
    manifest = manifest or ckpt.manifest
    data = build_dataset(manifest.validation(), ckpt.norm_stats)
    stats = routing_stats(ckpt.build_model(), data, seed=seed)
    if path:
        with open(path, "w") as f:
            f.write(stats.to_csv())
    return stats

