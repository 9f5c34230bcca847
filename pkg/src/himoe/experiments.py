"""Reusable experiment recipes: the bimodal learning check, heterogeneous
co-training against a dense baseline, and paired regularizer runs."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from . import tensor as T
from .codec import UNIFIED_DIM
from .context import ContextConfig, ContextInput
from .dataset import DatasetManifest
from .evaluate import evaluate, routing_stats
from .model import ExpertStackConfig, HiMoE, hierarchical_layout
from .objectives import EEF, JOINT, NEUTRAL, FlowSample, as_reg, flow_loss, hb_reg, model_losses
from .sampler import IntegratorConfig, integrate
from .sweep import variant_model
from .tensor import Tensor, directional_grad_check, grad_check, precision
from .train import AdamW, TrainConfig, Trainer, clip_grad_norm, deterministic_threads, lr_schedule, smoothed

# -- gradient harness ----------------------------------------------------------

LOSS_PARTS = ("flow", "as", "hb", "total")


def pinned_loss_parts(seed: int = 1, lambda_as: float = 0.3, lambda_hb: float = 0.7):
    """Tiny model (d=16, N=4, K=2, H=2) with routing frozen from one forward pass.

    Returns (model, part) where ``part(name)`` recomputes one loss component
    as a scalar Tensor. Large lambdas keep the regularizer terms visible in
    the total. Call under ``precision(np.float64)``.
    """
    cfg = ExpertStackConfig(depth=5, layer_kinds=hierarchical_layout(5), n_experts=4, top_k=2,
                            d_model=16, d_k=8, d_ff=16, horizon=2)
    m = HiMoE(cfg, ContextConfig(d_ctx=16, d_ff=16), seed=seed)
    rng = np.random.default_rng(seed)
    state = rng.standard_normal((2, 2 * UNIFIED_DIM))
    A = rng.standard_normal((2, 2, UNIFIED_DIM))
    fs = FlowSample.draw(A, rng)
    cc = m.ctx_cfg
    inp = ContextInput(rng.standard_normal((2, cc.n_streams, cc.tokens_per_stream, cc.feat_dim)),
                       np.ones((2, cc.n_streams), dtype=bool), rng.integers(0, cc.vocab, size=(2, cc.instr_len)))
    pinned = m(state, fs.A_tau, fs.tau, m.context.encode(inp)).routing()
    labels = np.array([[NEUTRAL, NEUTRAL, EEF, EEF], [NEUTRAL, NEUTRAL, JOINT, JOINT]])

    def part(name):
        out = m(state, fs.A_tau, fs.tau, m.context.encode(inp), routing=pinned)
        if name == "flow":
            return flow_loss(out.v_pred, fs.eps, A)
        if name == "as":
            vals = [as_reg(r.expert_outputs, r.gate.index, labels.reshape(-1))[0]
                    for r in out.moe_records(("ASMoE",))]
            return vals[0] + vals[1]
        if name == "hb":
            return hb_reg([r.gate for r in out.moe_records(("HBMoE",))])
        if name == "total":
            return model_losses(out, fs.eps, A, labels, lambda_as, lambda_hb).tensor
        raise ValueError(f"unknown loss part {name!r}")
    return m, part


def loss_gradient_error(name: str, max_coords: int = 3, n_dirs: int = 2) -> float:
    """Worst relative error of analytic vs finite-difference gradients for one
    loss part: sampled coordinates (4-point stencil) plus random directions."""
    with precision(np.float64):
        m, part = pinned_loss_parts()
        params = m.parameters()
        f = lambda: part(name)
        return max(grad_check(f, params, h=1e-3, order=4, max_coords=max_coords, seed=0),
                   directional_grad_check(f, params, h=1e-4, n_dirs=n_dirs))


# -- bimodal 1-D target ------------------------------------------------------

@dataclass(frozen=True)
class BimodalConfig:
    modes: tuple = (-1.0, 1.0)
    std: float = 0.1
    steps: int = 2000
    batch_size: int = 64
    seed: int = 0
    lr_init: float = 3e-3
    lr_floor: float = 3e-4
    warmup_steps: int = 100
    decay_end_step: int = 2000
    grad_clip: float = 1.0
    model: ExpertStackConfig = field(default_factory=lambda: ExpertStackConfig(
        depth=5, layer_kinds=hierarchical_layout(5), n_experts=4, top_k=2,
        d_model=32, d_k=16, d_ff=32, horizon=1))
    context: ContextConfig = field(default_factory=lambda: ContextConfig(d_ctx=16, d_ff=16))


def sample_mixture(rng: np.random.Generator, n: int, modes=(-1.0, 1.0), std: float = 0.1) -> np.ndarray:
    """Equal-weight Gaussian mixture."""
    centers = np.asarray(modes)[rng.integers(0, len(modes), size=n)]
    return centers + std * rng.standard_normal(n)


def mixture_cdf(x, modes=(-1.0, 1.0), std: float = 0.1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.mean([norm.cdf(x, loc=m, scale=std) for m in modes], axis=0)


def w1_to_mixture(samples, modes=(-1.0, 1.0), std: float = 0.1, grid: int = 200_001) -> float:
    """1-D Wasserstein-1 distance between an empirical sample and the mixture:
    the integral of |F_emp - F_mix| on a fine grid."""
    s = np.sort(np.asarray(samples, dtype=np.float64))
    lo = min(s[0], min(modes) - 10 * std) - 1.0
    hi = max(s[-1], max(modes) + 10 * std) + 1.0
    x = np.linspace(lo, hi, grid)
    f_emp = np.searchsorted(s, x, side="right") / len(s)
    return float(np.trapezoid(np.abs(f_emp - mixture_cdf(x, modes, std)), x))


# the 1-D target lives in unified slot 0; noise and flow are confined there
SLOT0 = np.arange(UNIFIED_DIM) == 0


def _unconditional_inputs(b: int, ctx_cfg: ContextConfig):
    """Constant state and context: the model sees nothing but noise and flow time."""
    state = np.zeros((b, 2 * UNIFIED_DIM))
    obs = np.zeros((b, ctx_cfg.n_streams, ctx_cfg.tokens_per_stream, ctx_cfg.feat_dim))
    ctx = ContextInput(obs, np.ones((b, ctx_cfg.n_streams), dtype=bool),
                       np.zeros((b, ctx_cfg.instr_len), dtype=np.int64))
    return state, ctx


def train_bimodal(cfg: BimodalConfig = BimodalConfig(), log=None):
    """Fit the flow model to 1-D mixture draws placed in unified slot 0.

    Noise is drawn in slot 0 only, so the other slots carry no signal and
    the regression target there is exactly 0.
    """
    model = HiMoE(cfg.model, cfg.context, seed=cfg.seed)
    named = list(model.named_parameters())
    params = [p for _, p in named]
    opt = AdamW(named, weight_decay=0.0)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    state, ctx = _unconditional_inputs(cfg.batch_size, cfg.context)
    h = cfg.model.horizon
    labels = np.zeros((cfg.batch_size, h + 2), dtype=np.int64)
    losses = []
    for step in range(1, cfg.steps + 1):
        A = np.zeros((cfg.batch_size, h, UNIFIED_DIM))
        A[:, :, 0] = sample_mixture(rng, cfg.batch_size * h, cfg.modes, cfg.std).reshape(-1, h)
        fs = FlowSample.draw(A, rng)
        fs = FlowSample.from_parts(A, fs.eps * SLOT0, fs.tau)
        out = model(state, Tensor(fs.A_tau), fs.tau, model.context.encode(ctx))
        lb = model_losses(out, fs.eps, fs.A, labels)
        model.zero_grad()
        T.backward(lb.tensor, params)
        clip_grad_norm(params, cfg.grad_clip)
        opt.step(lr_schedule(step, cfg))
        losses.append(lb.flow)
        if log and step % 200 == 0:
            log(f"step {step}  L_flow {smoothed(losses)[-1]:.4f}")
    return model, losses


def sample_bimodal(model: HiMoE, n: int = 1000, seed: int = 0,
                   integrator: IntegratorConfig = IntegratorConfig()) -> np.ndarray:
    state, ctx = _unconditional_inputs(n, model.ctx_cfg)
    a = integrate(model, state, ctx, np.random.default_rng(seed), integrator, active=SLOT0)
    return a[:, :, 0].reshape(-1)


# -- heterogeneous co-training -------------------------------------------------

def cotrain_config(seed: int = 0, steps: int = 2000, variant: str = "full",
                   manifest: DatasetManifest | None = None, **kw) -> TrainConfig:
    manifest = manifest or DatasetManifest(embodiments=["joint_a", "eef_a"], n_episodes=200, seed=0)
    cfg = TrainConfig(manifest=manifest, steps=steps, seed=seed,
                      decay_end_step=max(steps, 101), **kw)
    return replace(cfg, model=variant_model(cfg.model, variant))


def cotrain_run(seed: int = 0, steps: int = 2000, variant: str = "full", n_trials: int = 20,
                deterministic: bool = True, log=None, **kw) -> dict:
    """Train one model on the joint+EEF mixture; report losses, evaluation and
    routing divergence before and after training."""
    cfg = cotrain_config(seed, steps, variant, **kw)
    with deterministic_threads(deterministic):
        tr = Trainer(cfg)
        untrained = routing_stats(tr.model, tr.data, seed=seed) if variant != "dense" else None
        init_val = evaluate(tr.model, tr.data.stats, tr.manifest, n_trials=0, seed=seed)
        metrics = tr.run(log=log)
        rep = evaluate(tr.model, tr.data.stats, tr.manifest, n_trials=n_trials, seed=seed)
        trained = routing_stats(tr.model, tr.data, seed=seed) if variant != "dense" else None
    flow = [m["L_flow"] for m in metrics]
    out = {"variant": variant, "seed": seed, "params": tr.model.num_parameters(),
           "initial_flow": flow[0], "final_flow": float(smoothed(flow)[-1]),
           "initial_val_flow": init_val["mean_val_flow_loss"], "report": rep,
           "trainer": tr, "routing": trained}
    if trained is not None:
        out["js_untrained"] = untrained.js_divergence("space:Joint", "space:EEF")
        out["js_trained"] = trained.js_divergence("space:Joint", "space:EEF")
    return out


# -- paired regularizer runs ---------------------------------------------------

def regularizer_pair(which: str, values=(0.0, 0.1), seed: int = 0, steps: int = 400,
                     tail: int = 50, **kw) -> dict:
    """Train the same config twice, varying one regularizer coefficient.

    ``which="hb"`` reports the largest single-expert routing share at HB-MoE
    layers; ``which="as"`` reports L_AS averaged over the last ``tail`` steps.
    """
    out = {}
    for lam in values:
        key = "lambda_hb" if which == "hb" else "lambda_as"
        cfg = cotrain_config(seed, steps, **{key: lam}, **kw)
        with deterministic_threads(True):
            tr = Trainer(cfg)
            metrics = tr.run()
            if which == "hb":
                out[lam] = routing_stats(tr.model, tr.data, seed=seed).max_frequency(("HBMoE",))
            else:
                out[lam] = float(np.mean([m["L_AS"] for m in metrics[-tail:]]))
    return out
