"""Training driver: config, learning-rate schedule, AdamW, checkpoints, metrics.

Checkpoint layout::

    b"HIMOE-CKPT\\n"
    header   one line of JSON (sorted keys): format_version, config, manifest,
             norm_stats, step, rng_state, tensors (name, shape, offset, nbytes)
    blocks   raw little-endian float32 arrays in the order of ``tensors``:
             every parameter, then the first and second Adam moments
"""

from __future__ import annotations

import contextlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .context import ContextConfig
from .dataset import Dataset, DatasetManifest, build_dataset, stats_from_dict, stats_to_dict
from .model import ExpertStackConfig, HiMoE, token_labels
from .objectives import (BETA_ALPHA, BETA_BETA, LAMBDA_AS, LAMBDA_HB, TAU_C, FlowSample,
                         LossBreakdown, model_losses)
from .tensor import Tensor

CKPT_MAGIC = b"HIMOE-CKPT\n"
CKPT_VERSION = 1
FULL_SCALE_SCHEDULE = dict(lr_init=2.5e-5, lr_floor=2.5e-6, warmup_steps=1000, decay_end_step=30000)


class TrainingDiverged(FloatingPointError):
    """Raised when a loss or gradient goes non-finite; the last checkpoint is left untouched."""


@dataclass
class TrainConfig:
    model: ExpertStackConfig = field(default_factory=ExpertStackConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    lambda_as: float = LAMBDA_AS
    lambda_hb: float = LAMBDA_HB
    tau_c: float = TAU_C
    beta_alpha: float = BETA_ALPHA
    beta_beta: float = BETA_BETA
    lr_init: float = 1e-3
    lr_floor: float = 1e-4
    warmup_steps: int = 100
    decay_end_step: int = 2000
    schedule: str = "exponential"   # or "cosine"
    weight_decay: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    manifest: DatasetManifest = field(default_factory=DatasetManifest)
    manifest_path: str | None = None
    ckpt_every: int = 500
    init_from: str | None = None
    # fine-tuning from init_from: redraw expert weights, keep routers
    reinit_experts: bool = True

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ExpertStackConfig(**self.model)
        if isinstance(self.context, dict):
            self.context = ContextConfig(**self.context)
        if isinstance(self.manifest, dict):
            self.manifest = DatasetManifest(**self.manifest)
        self.adam_betas = tuple(self.adam_betas)
        if self.warmup_steps >= self.decay_end_step:
            raise ValueError("warmup_steps must be < decay_end_step")
        if not 0 < self.lr_floor <= self.lr_init:
            raise ValueError("need 0 < lr_floor <= lr_init")
        if self.schedule not in ("exponential", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")

    def resolved_manifest(self) -> DatasetManifest:
        return DatasetManifest.load(self.manifest_path) if self.manifest_path else self.manifest

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = asdict(self.model)
        d["context"] = asdict(self.context)
        d["manifest"] = self.manifest.to_dict()
        d["adam_betas"] = list(self.adam_betas)
        d["model"]["layer_kinds"] = list(d["model"]["layer_kinds"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def lr_schedule(step: int, cfg) -> float:
    """Linear warmup to lr_init, then decay to lr_floor at decay_end_step, then flat."""
    if step < 0:
        raise ValueError("step must be >= 0")
    w, end = cfg.warmup_steps, cfg.decay_end_step
    if step < w:
        return cfg.lr_init * step / w
    if step >= end:
        return cfg.lr_floor
    frac = (step - w) / (end - w)
    if getattr(cfg, "schedule", "exponential") == "cosine":
        return cfg.lr_floor + 0.5 * (cfg.lr_init - cfg.lr_floor) * (1.0 + math.cos(math.pi * frac))
    return cfg.lr_init * (cfg.lr_floor / cfg.lr_init) ** frac


class AdamW:
    """Adam with decoupled weight decay (applied to matrices only)."""

    def __init__(self, named_params: list, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = p.data - lr * upd
            if p.data.ndim >= 2 and self.wd:
                new = new - lr * self.wd * p.data
            p.assign_(new)


def clip_grad_norm(params: list, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params))
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite gradient norm")
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


@contextlib.contextmanager
def deterministic_threads(enabled: bool = True):
    """Pin BLAS/OpenMP pools to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


# -- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    manifest: DatasetManifest
    norm_stats: dict
    params: dict            # name -> float32 array
    adam_m: dict
    adam_v: dict
    step: int
    rng_state: dict
    format_version: int = CKPT_VERSION

    def _blocks(self):
        for prefix, group in (("param", self.params), ("adam_m", self.adam_m), ("adam_v", self.adam_v)):
            for name, arr in group.items():
                yield f"{prefix}/{name}", np.ascontiguousarray(arr, dtype="<f4")

    def to_bytes(self) -> bytes:
        index, blobs, offset = [], [], 0
        for name, arr in self._blocks():
            raw = arr.tobytes()
            index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {"format_version": self.format_version, "config": self.config.to_dict(),
                  "manifest": self.manifest.to_dict(), "norm_stats": stats_to_dict(self.norm_stats),
                  "step": self.step, "rng_state": self.rng_state, "tensors": index}
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return CKPT_MAGIC + head + b"\n" + b"".join(blobs)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if not blob.startswith(CKPT_MAGIC):
            raise ValueError("not a HiMoE checkpoint")
        nl = blob.index(b"\n", len(CKPT_MAGIC))
        head = json.loads(blob[len(CKPT_MAGIC):nl])
        if head["format_version"] != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {head['format_version']}")
        body = memoryview(blob)[nl + 1:]
        groups = {"param": {}, "adam_m": {}, "adam_v": {}}
        for t in head["tensors"]:
            prefix, name = t["name"].split("/", 1)
            arr = np.frombuffer(body[t["offset"]:t["offset"] + t["nbytes"]], dtype="<f4")
            groups[prefix][name] = arr.reshape(t["shape"]).astype(np.float32)
        return cls(TrainConfig.from_dict(head["config"]), DatasetManifest.from_dict(head["manifest"]),
                   stats_from_dict(head["norm_stats"]), groups["param"], groups["adam_m"],
                   groups["adam_v"], head["step"], head["rng_state"], head["format_version"])

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def build_model(self) -> HiMoE:
        model = HiMoE(self.config.model, self.config.context, seed=self.config.seed)
        model.load_state_dict(self.params)
        return model


# -- trainer ---------------------------------------------------------------

def reinit_experts(model: HiMoE, seed: int) -> None:
    """Fresh random expert weights (same init scheme), routers untouched."""
    fresh = HiMoE(model.cfg, model.ctx_cfg, seed=seed + 7919).state_dict()
    for name, p in model.named_parameters():
        if ".ffn.experts." in name:
            p.assign_(fresh[name])


class Trainer:
    """Owns the model, optimizer, data and the single training RNG."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset | None = None):
        self.cfg = cfg
        self.manifest = cfg.resolved_manifest()
        if self.manifest.horizon != cfg.model.horizon:
            raise ValueError(f"manifest horizon {self.manifest.horizon} != model horizon {cfg.model.horizon}")
        self.data = dataset or build_dataset(self.manifest)
        self.model = HiMoE(cfg.model, cfg.context, seed=cfg.seed)
        if cfg.init_from:
            init = Checkpoint.load(cfg.init_from)
            self.model.load_state_dict(init.params)
            if cfg.reinit_experts:
                reinit_experts(self.model, cfg.seed)
        self.named = list(self.model.named_parameters())
        self.opt = AdamW(self.named, cfg.adam_betas, cfg.adam_eps, cfg.weight_decay)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        self.step = 0

    # state capture ---------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.cfg, self.manifest, self.data.stats,
                          {n: p.data.copy() for n, p in self.named},
                          {n: m.copy() for n, m in zip(self.opt.names, self.opt.m)},
                          {n: v.copy() for n, v in zip(self.opt.names, self.opt.v)},
                          self.step, self.rng.bit_generator.state)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dataset: Dataset | None = None) -> "Trainer":
        cfg = replace(ckpt.config, init_from=None)
        tr = cls(cfg, dataset or build_dataset(ckpt.manifest, ckpt.norm_stats))
        tr.model.load_state_dict(ckpt.params)
        tr.opt.m = [ckpt.adam_m[n].copy() for n in tr.opt.names]
        tr.opt.v = [ckpt.adam_v[n].copy() for n in tr.opt.names]
        tr.opt.t = ckpt.step
        tr.step = ckpt.step
        tr.rng.bit_generator.state = ckpt.rng_state
        return tr

    # one update ------------------------------------------------------------
    def losses(self, batch, fs: FlowSample) -> LossBreakdown:
        cfg = self.cfg
        ctx = self.model.context.encode(batch.ctx)
        out = self.model(batch.state, Tensor(fs.A_tau), fs.tau, ctx)
        labels = token_labels(batch.action_space, cfg.model.horizon)
        return model_losses(out, fs.eps, fs.A, labels, cfg.lambda_as, cfg.lambda_hb, cfg.tau_c)

    def train_step(self) -> dict:
        cfg = self.cfg
        idx = self.rng.integers(0, len(self.data), size=cfg.batch_size)
        batch = self.data.batch(idx)
        fs = FlowSample.draw(batch.actions, self.rng, cfg.beta_alpha, cfg.beta_beta)
        try:
            lb = self.losses(batch, fs)
            params = [p for _, p in self.named]
            self.model.zero_grad()
            T.backward(lb.tensor, params)
            gnorm = clip_grad_norm(params, cfg.grad_clip)
        except FloatingPointError as e:
            raise TrainingDiverged(f"non-finite values at step {self.step + 1}: {e}") from e
        lr = lr_schedule(self.step + 1, cfg)
        self.opt.step(lr)
        self.step += 1
        rec = {"step": self.step, "lr": lr, "grad_norm": gnorm}
        rec.update(lb.as_dict())
        return rec

    def run(self, steps: int | None = None, out_dir=None, log=None) -> list:
        """Train for ``steps`` more updates (default: up to cfg.steps).

        With ``out_dir``, appends one JSON record per step to metrics.jsonl
        and writes ckpt.bin every ``ckpt_every`` steps and at the end.
        """
        target = self.step + steps if steps is not None else self.cfg.steps
        out = Path(out_dir) if out_dir else None
        if out:
            out.mkdir(parents=True, exist_ok=True)
        metrics = []
        fh = open(out / "metrics.jsonl", "a") if out else None
        try:
            while self.step < target:
                rec = self.train_step()
                metrics.append(rec)
                if fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if log and (self.step % 100 == 0 or self.step == target):
                    log(f"step {self.step}  L_flow {rec['L_flow']:.4f}  L_AS {rec['L_AS']:.4f}  "
                        f"L_HB {rec['L_HB']:.4f}  lr {rec['lr']:.2e}")
                if out and self.cfg.ckpt_every and self.step % self.cfg.ckpt_every == 0:
                    fh.flush()
                    self.checkpoint().save(out / "ckpt.bin")
        finally:
            if fh:
                fh.close()
        if out:
            self.checkpoint().save(out / "ckpt.bin")
        return metrics


def train(cfg: TrainConfig, out_dir=None, deterministic: bool = False, resume=None,
          dataset: Dataset | None = None, log=None) -> Trainer:
    with deterministic_threads(deterministic):
        if resume:
            tr = Trainer.from_checkpoint(Checkpoint.load(resume), dataset)
            tr.cfg = replace(tr.cfg, steps=cfg.steps)
        else:
            tr = Trainer(cfg, dataset)
        tr.run(out_dir=out_dir, log=log)
    return tr


def smoothed(values, alpha: float = 0.05) -> np.ndarray:
    """Exponential moving average, seeded with the first value."""
    out = np.empty(len(values))
    acc = values[0]
    for i, v in enumerate(values):
        acc = (1 - alpha) * acc + alpha * v if i else v
        out[i] = acc
    return out
