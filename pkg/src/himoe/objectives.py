"""Training objectives: flow matching, action-space contrastive term,
heterogeneity-balancing term, and their weighted sum.

Two different temperatures appear here: ``tau`` is flow time in [0, 1] and
``tau_c`` is the contrastive softmax temperature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEUTRAL, EEF, JOINT = 0, 1, 2
LAMBDA_AS = 0.002
LAMBDA_HB = 0.001
TAU_C = 0.1
BETA_ALPHA, BETA_BETA = 1.0, 1.5
COS_EPS = 1e-12


def sample_tau(rng: np.random.Generator, size=None, alpha: float = BETA_ALPHA,
               beta: float = BETA_BETA):
    """Flow time ~ Beta(alpha, beta); the default puts more mass near 0 (noise)."""
    return rng.beta(alpha, beta, size=size)


def flow_perturb(A: np.ndarray, eps: np.ndarray, tau) -> np.ndarray:
    A, eps = np.asarray(A), np.asarray(eps)
    if A.shape != eps.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {eps.shape}")
    tau = np.asarray(tau, dtype=A.dtype)
    if tau.ndim:
        tau = tau.reshape(tau.shape + (1,) * (A.ndim - tau.ndim))
    return tau * A + (1.0 - tau) * eps


@dataclass
class FlowSample:
    A: np.ndarray
    eps: np.ndarray
    tau: np.ndarray
    A_tau: np.ndarray
    target: np.ndarray

    @classmethod
    def draw(cls, A: np.ndarray, rng: np.random.Generator, alpha=BETA_ALPHA, beta=BETA_BETA):
        eps = rng.standard_normal(A.shape)
        tau = sample_tau(rng, size=A.shape[0] if A.ndim == 3 else None, alpha=alpha, beta=beta)
        return cls.from_parts(A, eps, tau)

    @classmethod
    def from_parts(cls, A: np.ndarray, eps: np.ndarray, tau):
        return cls(A, eps, np.asarray(tau), flow_perturb(A, eps, tau), eps - A)


def flow_loss(v_pred: Tensor, eps: np.ndarray, A: np.ndarray) -> Tensor:
    """Mean over batch, horizon and action dims of (v - (eps - A))²."""
    target = np.asarray(eps) - np.asarray(A)
    if v_pred.shape != target.shape:
        raise ValueError(f"v_pred {v_pred.shape} vs target {target.shape}")
    r = v_pred - target.astype(v_pred.dtype)
    return (r * r).mean()


def cosine_matrix(h: Tensor, anchor_idx: np.ndarray) -> Tensor:
    """sim(h[anchor_u, u], h[k, u]) for all experts k: [T, N] from h [N, T, d]."""
    n, t, _ = h.shape
    hn = h / T.sqrt((h * h).sum(axis=-1, keepdims=True) + COS_EPS)
    anchor = hn[anchor_idx, np.arange(t)]                      # [T, d]
    return (hn * anchor.reshape(1, t, -1)).sum(axis=-1).transpose()


def as_reg(expert_outputs: Tensor, index: np.ndarray, labels: np.ndarray,
           tau_c: float = TAU_C):
    """Contrastive action-space loss over non-neutral tokens.

    Anchor i and positive j are each token's top-1 and top-2 routed experts;
    the denominator runs over all N experts, self-term included.
    Returns (loss, n_tokens); with no eligible tokens the loss is 0.
    """
    n = expert_outputs.shape[0]
    index = np.asarray(index)
    if n < 2 or index.shape[1] < 2:
        raise ValueError("as_reg needs at least 2 experts and top_k >= 2")
    tok = np.nonzero(np.asarray(labels).reshape(-1) != NEUTRAL)[0]
    if tok.size == 0:
        return Tensor(0.0, dtype=expert_outputs.dtype), 0
    h = expert_outputs[:, tok]
    i, j = index[tok, 0], index[tok, 1]
    logits = cosine_matrix(h, i) * (1.0 / tau_c)
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(tok.size), j]
    return -picked.mean(), int(tok.size)


def hb_reg_layer(scores: Tensor, index: np.ndarray) -> Tensor:
    """Σ_i f_i P_i with f from the realized top-k routing and P the mean score."""
    u, n = scores.shape
    k = index.shape[1]
    f = np.bincount(np.asarray(index).reshape(-1), minlength=n) / (k * u)
    p = scores.mean(axis=0)
    return (p * f.astype(scores.dtype)).sum()


def hb_reg(gates: list) -> Tensor:
    """Balancing loss averaged over the given gate decisions (one per layer)."""
    if not gates:
        raise ValueError("hb_reg needs at least one gate decision")
    vals = [hb_reg_layer(g.scores, g.index) for g in gates]
    total = vals[0]
    for v in vals[1:]:
        total = total + v
    return total * (1.0 / len(vals))


@dataclass
class LossBreakdown:
    flow: float
    as_reg: float
    hb_reg: float
    total: float
    lambda_as: float
    lambda_hb: float
    tensor: Tensor | None = None

    def as_dict(self) -> dict:
        return {"L_flow": self.flow, "L_AS": self.as_reg, "L_HB": self.hb_reg,
                "total": self.total, "lambda_AS": self.lambda_as, "lambda_HB": self.lambda_hb}


def total_loss(l_flow, l_as, l_hb, lambda_as: float = LAMBDA_AS,
               lambda_hb: float = LAMBDA_HB) -> LossBreakdown:
    """L_flow + λ_AS·L_AS + λ_HB·L_HB.

    Accepts tensors or floats; the reported ``total`` is recombined in
    float64 from the float components.
    """
    parts = [x.item() if isinstance(x, Tensor) else float(x) for x in (l_flow, l_as, l_hb)]
    if not all(np.isfinite(parts)):
        raise FloatingPointError(f"non-finite loss component {parts}")
    total = parts[0] + lambda_as * parts[1] + lambda_hb * parts[2]
    tensor = None
    if isinstance(l_flow, Tensor):
        tensor = l_flow
        if lambda_as and isinstance(l_as, Tensor):
            tensor = tensor + l_as * lambda_as
        if lambda_hb and isinstance(l_hb, Tensor):
            tensor = tensor + l_hb * lambda_hb
    return LossBreakdown(parts[0], parts[1], parts[2], total, lambda_as, lambda_hb, tensor)


def model_losses(out, eps, A, labels, lambda_as=LAMBDA_AS, lambda_hb=LAMBDA_HB,
                 tau_c=TAU_C) -> LossBreakdown:
    """Weighted total loss for one forward pass of :class:`himoe.model.HiMoE`.

    AS-Reg averages over ASMoE (and generic MoE) layers, HB-Reg over HBMoE
    (and generic MoE) layers; either is 0 when no such layer exists.
    """
    l_flow = flow_loss(out.v_pred, eps, A)
    lab = np.asarray(labels).reshape(-1)
    as_vals = []
    for r in out.moe_records(("ASMoE", "MoE")):
        if r.gate.index.shape[1] >= 2:
            val, cnt = as_reg(r.expert_outputs, r.gate.index, lab, tau_c)
            if cnt:
                as_vals.append(val)
    l_as = _mean(as_vals, l_flow)
    hb_gates = [r.gate for r in out.moe_records(("HBMoE", "MoE"))]
    l_hb = hb_reg(hb_gates) if hb_gates else Tensor(0.0, dtype=l_flow.dtype)
    return total_loss(l_flow, l_as, l_hb, lambda_as, lambda_hb)


def _mean(vals, like: Tensor) -> Tensor:
    if not vals:
        return Tensor(0.0, dtype=like.dtype)
    total = vals[0]
    for v in vals[1:]:
        total = total + v
    return total * (1.0 / len(vals))
