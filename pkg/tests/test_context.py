import time

import numpy as np
import pytest

from himoe.attention import attention, fused_attention
from himoe.context import ContextConfig, ContextEncoder, ContextInput, StaleCacheError
from himoe.model import ExpertStackConfig, HiMoE
from himoe.sampler import IntegratorConfig, integrate
from himoe.tensor import Tensor

CFG = ContextConfig(d_ctx=16, d_ff=16)


def make_input(b=3, seed=0, stream_mask=None):
    rng = np.random.default_rng(seed)
    obs = rng.standard_normal((b, CFG.n_streams, CFG.tokens_per_stream, CFG.feat_dim))
    mask = np.ones((b, CFG.n_streams), dtype=bool) if stream_mask is None else stream_mask
    instr = rng.integers(0, CFG.vocab, size=(b, CFG.instr_len))
    return ContextInput(obs, mask, instr)


def encoder(depth=3, d_k=8, seed=0):
    return ContextEncoder(CFG, depth, d_k, np.random.default_rng(seed))


def test_deterministic_and_shapes():
    enc = encoder()
    inp = make_input()
    a, b = enc.encode(inp), enc.encode(inp)
    assert a.n_layers == 3
    for ka, kb, va in zip(a.keys, b.keys, a.values):
        np.testing.assert_array_equal(ka.data, kb.data)
        n_tok = CFG.n_streams * CFG.tokens_per_stream + CFG.instr_len
        assert ka.shape == (3, n_tok, 8) and va.shape == (3, n_tok, 8)


def test_masked_stream_matches_removed_stream():
    enc = encoder()
    mask = np.array([[True, False]] * 3)
    full = make_input(stream_mask=mask)
    dropped = ContextInput(full.obs[:, :1], np.ones((3, 1), dtype=bool), full.instr, stream_ids=np.array([0]))
    kv_m, kv_d = enc.encode(full), enc.encode(dropped)
    rng = np.random.default_rng(5)
    q = Tensor(rng.standard_normal((3, 4, 8)))
    lk, lv = Tensor(rng.standard_normal((3, 4, 8))), Tensor(rng.standard_normal((3, 4, 8)))
    for l in range(kv_m.n_layers):
        a = fused_attention(q, lk, lv, kv_m.keys[l], kv_m.values[l], kv_m.mask)
        b = fused_attention(q, lk, lv, kv_d.keys[l], kv_d.values[l], kv_d.mask)
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)


def test_input_validation():
    with pytest.raises(ValueError):
        make_input(stream_mask=np.zeros((3, 2), dtype=bool))
    with pytest.raises(ValueError):
        ContextInput(np.zeros((1, 0, 2, 6)), np.zeros((1, 0), dtype=bool), np.zeros((1, 0)))


def test_cache_is_bitwise_and_goes_stale():
    enc = encoder()
    inp = make_input()
    cache = enc.cache(inp)
    fresh = enc.encode(inp)
    for a, b in zip(cache.get().keys, fresh.keys):
        np.testing.assert_array_equal(a.data, b.data)
    p = enc.parameters()[0]
    p.assign_(p.data + 1e-3)
    assert not cache.valid
    with pytest.raises(StaleCacheError):
        cache.get()


def tiny_model(seed=0):
    return HiMoE(ExpertStackConfig(depth=5, layer_kinds=("ASMoE", "HBMoE", "Dense", "HBMoE", "ASMoE"),
                                   n_experts=4, top_k=2, d_model=16, d_k=8, d_ff=16, horizon=4),
                 CFG, seed=seed)


def test_integration_with_and_without_cache_identical():
    m = tiny_model()
    inp = make_input()
    state = np.zeros((3, 48))
    a = integrate(m, state, inp, np.random.default_rng(0), IntegratorConfig(10))
    b = integrate(m, state, m.context.cache(inp), np.random.default_rng(0), IntegratorConfig(10))
    np.testing.assert_array_equal(a, b)


def test_cache_is_faster():
    m = tiny_model()
    inp = make_input(b=16)
    state = np.zeros((16, 48))
    cfg = IntegratorConfig(20)

    def best(ctx_fn):
        times = []
        for _ in range(3):
            t = time.perf_counter()
            integrate(m, state, ctx_fn(), np.random.default_rng(0), cfg)
            times.append(time.perf_counter() - t)
        return min(times)

    assert best(lambda: m.context.cache(inp)) < best(lambda: inp)


def test_attention_examples():
    rng = np.random.default_rng(0)
    q = Tensor(rng.standard_normal((2, 3, 4)))
    k = Tensor(rng.standard_normal((2, 5, 4)))
    v = Tensor(rng.standard_normal((2, 5, 4)))
    out, w = fused_attention(q, k, v, return_weights=True)
    np.testing.assert_array_equal(out.data, attention(q, k, v).data)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)
    # one context key aligned with q at large scale saturates onto its value
    q1 = q.data[:, :1, :] / np.linalg.norm(q.data[:, :1, :], axis=-1, keepdims=True) * 2.0
    q = Tensor(np.concatenate([q1, q.data[:, 1:]], axis=1))
    out = fused_attention(q, k, v)
    ck = Tensor(q1 * 50.0)
    cv = Tensor(np.full((2, 1, 4), 7.0))
    sat = fused_attention(q[:, :1], k, v, ck, cv, np.ones((2, 1), dtype=bool))
    np.testing.assert_allclose(sat.data, 7.0, atol=1e-6)
    # all context masked: plain self-attention
    masked = fused_attention(q, k, v, ck, cv, np.zeros((2, 1), dtype=bool))
    np.testing.assert_allclose(masked.data, out.data, atol=1e-12)


def test_attention_width_mismatch():
    x = Tensor(np.zeros((1, 2, 4)))
    with pytest.raises(ValueError):
        fused_attention(x, x, x, Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((1, 2, 3))))
