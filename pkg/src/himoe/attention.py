"""Scaled dot-product attention with optional concatenated context keys/values."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None,
              return_weights: bool = False):
    """softmax(q kᵀ / sqrt(d_k)) v over the last two axes.

    ``key_mask`` is a boolean [..., n_keys] array; False keys get zero weight.
    """
    d_k = q.shape[-1]
    if k.shape[-1] != d_k:
        raise ValueError(f"query width {d_k} != key width {k.shape[-1]}")
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d_k))
    mask = None
    if key_mask is not None:
        mask = np.broadcast_to(np.expand_dims(key_mask, -2), scores.shape)
    p = T.softmax(scores, axis=-1, mask=mask)
    out = p @ v
    return (out, p) if return_weights else out


def fused_attention(q: Tensor, local_k: Tensor, local_v: Tensor,
                    ctx_k: Tensor | None = None, ctx_v: Tensor | None = None,
                    ctx_mask: np.ndarray | None = None, return_weights: bool = False):
    """Attend over [local ; context] keys and values.

    Local positions are always visible; context positions follow ``ctx_mask``.
    Shapes: q/local_k/local_v [B, U, d_k], ctx_k/ctx_v [B, C, d_k], ctx_mask [B, C].
    """
    for name, t in (("local_k", local_k), ("local_v", local_v), ("ctx_k", ctx_k), ("ctx_v", ctx_v)):
        if t is not None and t.shape[-1] != q.shape[-1]:
            raise ValueError(f"{name} width {t.shape[-1]} != query width {q.shape[-1]}")
    if ctx_k is None or ctx_k.shape[-2] == 0:
        return attention(q, local_k, local_v, return_weights=return_weights)
    keys = T.concat([local_k, ctx_k], axis=-2)
    vals = T.concat([local_v, ctx_v], axis=-2)
    local_mask = np.ones(local_k.shape[:-1], dtype=bool)
    if ctx_mask is None:
        ctx_mask = np.ones(ctx_k.shape[:-1], dtype=bool)
    mask = np.concatenate([local_mask, np.broadcast_to(ctx_mask, ctx_k.shape[:-1])], axis=-1)
    return attention(q, keys, vals, mask, return_weights=return_weights)
