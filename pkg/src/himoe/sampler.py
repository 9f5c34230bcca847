"""Euler integration of the learned flow field from noise (tau=0) to actions (tau=1).

Training interpolates A_tau = tau*A + (1-tau)*eps and regresses v = eps - A.
Along that path dA_tau/dtau = A - eps = -v, so each step subtracts the
predicted field: A <- A - dt * v(A, tau).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .codec import UNIFIED_DIM
from .context import ContextCache, ContextInput, ContextKV
from .tensor import Tensor


@dataclass(frozen=True)
class IntegratorConfig:
    steps: int = 10
    scheme: str = "euler"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.scheme != "euler":
            raise ValueError(f"unsupported scheme {self.scheme!r}")


def euler(field: Callable, eps: np.ndarray, steps: int) -> np.ndarray:
    """Integrate ``field(A, tau) -> v`` from A=eps at tau=0 to tau=1."""
    a = np.array(eps, dtype=np.float64)
    dt = 1.0 / steps
    for n in range(steps):
        v = np.asarray(field(a, n * dt), dtype=np.float64)
        a = a - dt * v
        if not np.isfinite(a).all():
            raise FloatingPointError(f"non-finite actions at integration step {n}")
    return a


def integrate(model, state: np.ndarray, ctx, rng: np.random.Generator,
              cfg: IntegratorConfig = IntegratorConfig(), active=None) -> np.ndarray:
    """Sample a normalized action chunk [B, H, 24] from ``model``.

    ``ctx`` may be a :class:`ContextInput` (re-encoded every step), a
    :class:`ContextKV`, or a :class:`ContextCache` (checked for staleness
    every step). One noise draw per chunk; nothing random after that.
    ``active`` (bool [24]) restricts noise and motion to those slots; the
    rest stay at 0.
    """
    state = np.asarray(state)
    b = state.shape[0]
    eps = rng.standard_normal((b, model.cfg.horizon, UNIFIED_DIM))
    keep = np.ones(UNIFIED_DIM) if active is None else np.asarray(active, dtype=np.float64)
    eps = eps * keep

    def kv():
        if isinstance(ctx, ContextCache):
            return ctx.get()
        if isinstance(ctx, ContextInput):
            return model.context.encode(ctx)
        return ctx

    def field(a, tau):
        out = model(state, Tensor(a), np.full(b, tau), kv())
        return out.v_pred.data * keep

    with T.no_grad():
        return euler(field, eps, cfg.steps)


def sample_chunk(model, state, ctx_input: ContextInput, rng, cfg=IntegratorConfig(),
                 use_cache: bool = True) -> np.ndarray:
    ctx = model.context.cache(ctx_input) if use_cache else ctx_input
    return integrate(model, state, ctx, rng, cfg)
