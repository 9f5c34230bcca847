"""Small trainable context encoder standing in for the vision-language backbone.

It encodes synthetic observation tokens (one group per camera stream) and
instruction token ids, and exposes the keys/values of each of its attention
layers so the action model can attend to them layer by layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import attention
from .nn import MLP, Embedding, LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class ContextConfig:
    d_ctx: int = 64
    d_ff: int = 128
    n_streams: int = 2
    tokens_per_stream: int = 2
    feat_dim: int = 6
    vocab: int = 18
    instr_len: int = 3


@dataclass
class ContextInput:
    """Batched context: obs [B, S, T, F], stream_mask [B, S], instr [B, L].

    ``stream_ids`` names the stream slot of each of the S groups so a caller
    may drop a stream entirely and keep the others' embeddings unchanged.
    """

    obs: np.ndarray
    stream_mask: np.ndarray
    instr: np.ndarray
    stream_ids: np.ndarray | None = None

    def __post_init__(self):
        self.obs = np.asarray(self.obs)
        self.stream_mask = np.asarray(self.stream_mask, dtype=bool)
        self.instr = np.asarray(self.instr, dtype=np.int64)
        if self.stream_ids is None:
            self.stream_ids = np.arange(self.obs.shape[1])
        if self.obs.ndim != 4 or self.stream_mask.shape != self.obs.shape[:2]:
            raise ValueError("obs must be [B, S, T, F] with stream_mask [B, S]")
        if self.obs.shape[1] == 0 and self.instr.shape[1] == 0:
            raise ValueError("empty context input")
        if self.obs.shape[1] and not self.stream_mask.any(axis=1).all():
            raise ValueError("every sample needs at least one observation stream")

    @property
    def batch(self) -> int:
        return self.obs.shape[0]

    def token_mask(self) -> np.ndarray:
        b, s, t, _ = self.obs.shape
        obs_mask = np.repeat(self.stream_mask, t, axis=1)
        return np.concatenate([obs_mask, np.ones((b, self.instr.shape[1]), dtype=bool)], axis=1)

    def take(self, idx) -> "ContextInput":
        return ContextInput(self.obs[idx], self.stream_mask[idx], self.instr[idx], self.stream_ids)


@dataclass
class ContextKV:
    """Per-layer (K, V) of shape [B, C, d_k] plus the key mask [B, C]."""

    keys: list
    values: list
    mask: np.ndarray

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    def detached(self) -> "ContextKV":
        return ContextKV([k.detach() for k in self.keys], [v.detach() for v in self.values],
                         self.mask.copy())


class StaleCacheError(RuntimeError):
    pass


class ContextBlock(Module):
    def __init__(self, d: int, d_k: int, d_ff: int, rng):
        self.ln1 = LayerNorm(d)
        self.wq = Linear(d, d_k, rng)
        self.wk = Linear(d, d_k, rng)
        self.wv = Linear(d, d_k, rng)
        self.wo = Linear(d_k, d, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = MLP(d, d_ff, d, rng)


class ContextEncoder(Module):
    def __init__(self, cfg: ContextConfig, depth: int, d_k: int, rng: np.random.Generator):
        self._cfg = cfg
        d = cfg.d_ctx
        self.obs_proj = Linear(cfg.feat_dim, d, rng)
        self.stream_emb = Embedding(cfg.n_streams, d, rng)
        self.obs_pos = Embedding(cfg.tokens_per_stream, d, rng)
        self.instr_emb = Embedding(cfg.vocab, d, rng, scale=1.0)
        self.instr_pos = Embedding(cfg.instr_len, d, rng)
        self.blocks = [ContextBlock(d, d_k, cfg.d_ff, rng) for _ in range(depth)]

    def __call__(self, inp: ContextInput) -> ContextKV:
        return self.encode(inp)

    def embed(self, inp: ContextInput) -> Tensor:
        b, s, t, f = inp.obs.shape
        parts = []
        if s:
            h = self.obs_proj(Tensor(inp.obs))
            h = h + self.stream_emb(inp.stream_ids).reshape(1, s, 1, -1)
            h = h + self.obs_pos(np.arange(t)).reshape(1, 1, t, -1)
            parts.append(h.reshape(b, s * t, -1))
        if inp.instr.shape[1]:
            h = self.instr_emb(inp.instr) + self.instr_pos(np.arange(inp.instr.shape[1]))
            parts.append(h)
        return T.concat(parts, axis=1) if len(parts) > 1 else parts[0]

    def encode(self, inp: ContextInput) -> ContextKV:
        """Run the stub; each block's attention keys/values are exported.

        Masked tokens are excluded as keys inside the stub too, so a fully
        masked stream has no influence on any exported unmasked position.
        """
        mask = inp.token_mask()
        h = self.embed(inp)
        keys, values = [], []
        for blk in self.blocks:
            x = blk.ln1(h)
            q, k, v = blk.wq(x), blk.wk(x), blk.wv(x)
            keys.append(k)
            values.append(v)
            h = h + blk.wo(attention(q, k, v, mask))
            h = h + blk.ffn(blk.ln2(h))
        return ContextKV(keys, values, mask)

    def cache(self, inp: ContextInput) -> "ContextCache":
        with T.no_grad():
            kv = self.encode(inp)
        return ContextCache(self, kv, self.param_versions())


class ContextCache:
    """Context KV computed once and reused across integration steps.

    Any parameter update (tracked through tensor versions) makes the handle
    stale; ``get`` then raises :class:`StaleCacheError`.
    """

    def __init__(self, encoder: ContextEncoder, kv: ContextKV, versions: tuple):
        self._encoder = encoder
        self._kv = kv
        self._versions = versions

    @property
    def valid(self) -> bool:
        return self._encoder.param_versions() == self._versions

    def get(self) -> ContextKV:
        if not self.valid:
            raise StaleCacheError("context cache is stale: encoder parameters changed since caching")
        return self._kv
