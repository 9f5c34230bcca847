"""Hierarchical mixture-of-experts action model.

Token sequence per sample: [state, flow-time, action_1 .. action_H], so
U = H + 2. Each layer is pre-norm fused attention (local tokens plus the
matching context-encoder layer's keys/values) followed by a feed-forward
slot that is dense or a mixture of experts.

Layer kinds:

* ``ASMoE``  - boundary layers; every expert is evaluated on every token so
  the action-space contrastive term can see all N outputs.
* ``HBMoE``  - adjacent layers; only routed experts run.
* ``Dense``  - shared feed-forward block.
* ``MoE``    - single generic MoE layer receiving both regularizers (ablation).

Top-k routing is piecewise constant, so gradients are only defined with the
selection held fixed; pass ``routing=`` to pin it for finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import fused_attention
from .codec import UNIFIED_DIM
from .context import ContextConfig, ContextEncoder, ContextKV
from .nn import MLP, Embedding, LayerNorm, Linear, Module
from .tensor import Tensor

LAYER_KINDS = ("ASMoE", "HBMoE", "Dense", "MoE")
MOE_KINDS = ("ASMoE", "HBMoE", "MoE")


def hierarchical_layout(depth: int) -> tuple:
    """AS at both ends, HB just inside them, dense in the middle."""
    if depth < 5:
        raise ValueError("the hierarchical layout needs depth >= 5")
    return ("ASMoE", "HBMoE") + ("Dense",) * (depth - 4) + ("HBMoE", "ASMoE")


@dataclass(frozen=True)
class ExpertStackConfig:
    depth: int = 6
    layer_kinds: tuple = field(default_factory=lambda: hierarchical_layout(6))
    n_experts: int = 8
    top_k: int = 2
    d_model: int = 64
    d_k: int = 32
    d_ff: int = 128
    horizon: int = 8
    dense_ff: int | None = None
    # off-pattern layouts are allowed only for ablation variants
    check_layout: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layer_kinds", tuple(self.layer_kinds))
        if len(self.layer_kinds) != self.depth:
            raise ValueError(f"{len(self.layer_kinds)} layer kinds for depth {self.depth}")
        bad = [k for k in self.layer_kinds if k not in LAYER_KINDS]
        if bad:
            raise ValueError(f"unknown layer kinds {bad}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k={self.top_k} must be in [1, n_experts={self.n_experts}]")
        if self.check_layout and self.layer_kinds != hierarchical_layout(self.depth):
            raise ValueError(f"layer_kinds {self.layer_kinds} break the AS/HB/dense sandwich")

    @property
    def tokens(self) -> int:
        return self.horizon + 2

    @property
    def dense_width(self) -> int:
        return self.dense_ff or self.d_ff

    def with_layout(self, kinds, **kw) -> "ExpertStackConfig":
        return replace(self, layer_kinds=tuple(kinds), depth=len(kinds), check_layout=False, **kw)


FULL_SCALE = dict(n_experts=32, top_k=4)


@dataclass
class GateDecision:
    """scores [T, N] (softmax), index [T, K] (descending score), weights [T, K]."""

    scores: Tensor
    index: np.ndarray
    weights: Tensor


def gate_from_logits(logits: Tensor, k: int, pinned: np.ndarray | None = None) -> GateDecision:
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top_k={k} exceeds {n} experts")
    # sorted-sum softmax: permuting experts permutes scores bitwise
    s = T.softmax(logits, axis=-1, sorted_sum=True)
    idx = T.topk(s.data, k)[0] if pinned is None else np.asarray(pinned)
    # s[r] / sum(s[r]) == softmax(logits[r]); the latter keeps unselected
    # logits out of the weight computation entirely
    rows = np.arange(s.shape[0])[:, None]
    w = T.softmax(logits[rows, idx], axis=-1, sorted_sum=True)
    return GateDecision(s, idx, w)


def gate(hidden: Tensor, proj: Linear, k: int, pinned: np.ndarray | None = None) -> GateDecision:
    return gate_from_logits(proj(hidden), k, pinned)


class MoEFeedForward(Module):
    def __init__(self, d: int, d_ff: int, n: int, k: int, materialize_all: bool, rng):
        self.router = Linear(d, n, rng, bias=False)
        self.experts = [MLP(d, d_ff, d, rng) for _ in range(n)]
        self._k = k
        self._all = materialize_all

    def __call__(self, x: Tensor, pinned=None):
        return moe_forward(x, self.experts, self.router, self._k, self._all, pinned)


def moe_forward(tokens: Tensor, experts: list, router: Linear, k: int, materialize_all: bool,
                pinned: np.ndarray | None = None):
    """Route each token to its top-k experts and mix their outputs.

    Returns (output [T, d], GateDecision, expert outputs). Expert outputs are
    [N, T, d] when ``materialize_all`` else None. Routed contributions are
    laid out per (token, rank) and summed over rank, so the result does not
    depend on the order in which experts are stored.
    """
    g = gate(tokens, router, k, pinned)
    n_tok, d = tokens.shape
    rows = np.arange(n_tok)[:, None]
    if materialize_all:
        h_all = T.stack([e(tokens) for e in experts], axis=0)
        picked = h_all[g.index, np.broadcast_to(rows, g.index.shape)]
    else:
        h_all = None
        parts, pos_tok, pos_rank = [], [], []
        for i, e in enumerate(experts):
            tok, rank = np.nonzero(g.index == i)
            if tok.size == 0:
                continue
            parts.append(e(tokens[tok]))
            pos_tok.append(tok)
            pos_rank.append(rank)
        where = (np.concatenate(pos_tok), np.concatenate(pos_rank))
        flat = T.concat(parts, axis=0) if len(parts) > 1 else parts[0]
        picked = T.scatter(flat, where, (n_tok, k, d))
    out = (picked * g.weights.reshape(n_tok, k, 1)).sum(axis=1)
    return out, g, h_all


@dataclass
class LayerRecord:
    layer: int
    kind: str
    gate: GateDecision | None = None
    expert_outputs: Tensor | None = None


class HiMoELayer(Module):
    def __init__(self, kind: str, cfg: ExpertStackConfig, rng):
        d = cfg.d_model
        self._kind = kind
        self.ln1 = LayerNorm(d)
        self.wq = Linear(d, cfg.d_k, rng)
        self.wk = Linear(d, cfg.d_k, rng)
        self.wv = Linear(d, cfg.d_k, rng)
        self.wo = Linear(cfg.d_k, d, rng)
        self.ln2 = LayerNorm(d)
        if kind == "Dense":
            self.ffn = MLP(d, cfg.dense_width, d, rng)
        else:
            self.ffn = MoEFeedForward(d, cfg.d_ff, cfg.n_experts, cfg.top_k,
                                      materialize_all=kind in ("ASMoE", "MoE"), rng=rng)

    @property
    def kind(self) -> str:
        return self._kind

    def __call__(self, h: Tensor, ctx_k, ctx_v, ctx_mask, index: int, pinned=None):
        b, u, d = h.shape
        x = self.ln1(h)
        a = fused_attention(self.wq(x), self.wk(x), self.wv(x), ctx_k, ctx_v, ctx_mask)
        h = h + self.wo(a)
        x = self.ln2(h).reshape(b * u, d)
        if self._kind == "Dense":
            return h + self.ffn(x).reshape(b, u, d), LayerRecord(index, self._kind)
        y, g, h_all = self.ffn(x, pinned)
        return h + y.reshape(b, u, d), LayerRecord(index, self._kind, g, h_all)


def time_embedding(tau: np.ndarray, dim: int, min_period: float = 4e-3,
                   max_period: float = 4.0) -> np.ndarray:
    """Sinusoidal features of flow time, shape [B, dim]."""
    tau = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
    frac = np.linspace(0.0, 1.0, dim // 2)
    period = min_period * (max_period / min_period) ** frac
    ang = 2.0 * math.pi * tau / period
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class ForwardOutput:
    v_pred: Tensor
    records: list

    def moe_records(self, kinds=MOE_KINDS) -> list:
        return [r for r in self.records if r.kind in kinds]

    def routing(self) -> dict:
        return {r.layer: r.gate.index.copy() for r in self.records if r.gate is not None}


class HiMoE(Module):
    """Action expert plus its context encoder (trained jointly)."""

    def __init__(self, cfg: ExpertStackConfig, ctx_cfg: ContextConfig | None = None, seed: int = 0):
        rng = np.random.default_rng(seed)
        self._cfg = cfg
        self._ctx_cfg = ctx_cfg or ContextConfig()
        d = cfg.d_model
        self.context = ContextEncoder(self._ctx_cfg, cfg.depth, cfg.d_k, rng)
        self.state_in = MLP(2 * UNIFIED_DIM, d, d, rng)
        self.action_in = MLP(UNIFIED_DIM, d, d, rng)
        self.time_in = MLP(d, d, d, rng)
        self.pos = Embedding(cfg.tokens, d, rng)
        self.layers = [HiMoELayer(kind, cfg, rng) for kind in cfg.layer_kinds]
        self.ln_out = LayerNorm(d)
        self.head = Linear(d, UNIFIED_DIM, rng)

    @property
    def cfg(self) -> ExpertStackConfig:
        return self._cfg

    @property
    def ctx_cfg(self) -> ContextConfig:
        return self._ctx_cfg

    def __call__(self, state, a_noisy, tau, ctx: ContextKV, routing: dict | None = None) -> ForwardOutput:
        return self.forward(state, a_noisy, tau, ctx, routing)

    def forward(self, state, a_noisy, tau, ctx: ContextKV, routing: dict | None = None) -> ForwardOutput:
        """Predict the flow field.

        state [B, 48] (normalized values ⊕ mask), a_noisy [B, H, 24], tau [B].
        """
        cfg = self._cfg
        a_noisy = a_noisy if isinstance(a_noisy, Tensor) else Tensor(a_noisy)
        b, hz, dim = a_noisy.shape
        if hz != cfg.horizon or dim != UNIFIED_DIM:
            raise ValueError(f"a_noisy shape {a_noisy.shape} != (B, {cfg.horizon}, {UNIFIED_DIM})")
        state = np.asarray(state)
        if state.shape != (b, 2 * UNIFIED_DIM):
            raise ValueError(f"state shape {state.shape} != ({b}, {2 * UNIFIED_DIM})")
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (b,))
        if np.any(tau < 0) or np.any(tau > 1):
            raise ValueError("flow time must lie in [0, 1]")
        if ctx.n_layers != cfg.depth:
            raise ValueError(f"context has {ctx.n_layers} layers, model has {cfg.depth}")

        s_tok = self.state_in(Tensor(state)).reshape(b, 1, -1)
        t_tok = self.time_in(Tensor(time_embedding(tau, cfg.d_model))).reshape(b, 1, -1)
        a_tok = self.action_in(a_noisy)
        h = T.concat([s_tok, t_tok, a_tok], axis=1) + self.pos(np.arange(cfg.tokens))

        routing = routing or {}
        records = []
        for i, layer in enumerate(self.layers):
            h, rec = layer(h, ctx.keys[i], ctx.values[i], ctx.mask, i, routing.get(i))
            records.append(rec)
        out = self.head(self.ln_out(h[:, 2:, :]))
        return ForwardOutput(out, records)


def token_labels(action_space_codes: np.ndarray, horizon: int) -> np.ndarray:
    """Per-token action-space labels [B, H+2]: 0 neutral (state, time), else the code."""
    codes = np.asarray(action_space_codes).reshape(-1, 1)
    lab = np.zeros((codes.shape[0], horizon + 2), dtype=np.int64)
    lab[:, 2:] = codes
    return lab
