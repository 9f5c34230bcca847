import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from himoe.experiments import loss_gradient_error, pinned_loss_parts
from himoe.model import gate_from_logits
from himoe.objectives import (EEF, JOINT, NEUTRAL, FlowSample, as_reg, flow_loss, flow_perturb,
                              hb_reg, hb_reg_layer, model_losses, sample_tau, total_loss)
from himoe.tensor import Tensor, precision



@pytest.fixture(autouse=True)
def f64():
    with precision(np.float64):
        yield


def test_tau_beta_moments_and_uniform_degenerate():
    rng = np.random.default_rng(0)
    t = sample_tau(rng, size=100_000)
    assert t.min() >= 0 and t.max() <= 1
    assert abs(t.mean() - 0.4) < 0.01
    u = sample_tau(rng, size=100_000, alpha=1.0, beta=1.0)
    assert stats.kstest(u, "uniform").statistic < 0.01


def test_flow_perturb_examples():
    A, eps = np.array([[2.0]]), np.array([[0.0]])
    np.testing.assert_array_equal(flow_perturb(A, eps, 0.5), [[1.0]])
    rng = np.random.default_rng(1)
    A, eps = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    np.testing.assert_array_equal(flow_perturb(A, eps, 1.0), A)
    np.testing.assert_array_equal(flow_perturb(A, eps, 0.0), eps)
    with pytest.raises(ValueError):
        flow_perturb(A, eps[:2], 0.3)


def test_flow_sample_invariants():
    A = np.random.default_rng(2).standard_normal((5, 8, 24))
    fs = FlowSample.draw(A, np.random.default_rng(3))
    assert fs.tau.shape == (5,)
    np.testing.assert_array_equal(fs.A_tau, fs.tau[:, None, None] * A + (1 - fs.tau[:, None, None]) * fs.eps)
    np.testing.assert_array_equal(fs.target, fs.eps - A)


def test_flow_loss_examples():
    rng = np.random.default_rng(4)
    A, eps = rng.standard_normal((2, 3, 24)), rng.standard_normal((2, 3, 24))
    assert flow_loss(Tensor(eps - A), eps, A).item() == 0.0
    assert flow_loss(Tensor(eps - A + 1.0), eps, A).item() == pytest.approx(1.0, abs=1e-12)
    r = rng.standard_normal(A.shape)
    assert flow_loss(Tensor(eps - A + r), eps, A).item() == pytest.approx(
        flow_loss(Tensor(eps - A - r), eps, A).item(), abs=1e-12)


def _as(h, index, labels=None, tau_c=0.1):
    h = np.asarray(h, dtype=float)
    labels = np.full(h.shape[1], EEF) if labels is None else labels
    return as_reg(Tensor(h), np.asarray(index), labels, tau_c)


def test_as_reg_examples():
    h = np.array([[[1.0, 0.0]], [[1.0, 0.0]]])
    loss, n = _as(h, [[0, 1]])
    assert n == 1 and loss.item() == pytest.approx(np.log(2), abs=1e-12)
    h = np.array([[[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]], [[0.0, 0.0, 1.0]]])
    loss, _ = _as(h, [[0, 1]])
    assert loss.item() == pytest.approx(-np.log(1 / (np.exp(10) + 2)), abs=1e-9)
    assert loss.item() == pytest.approx(10.0, abs=1e-4)


def test_as_reg_neutral_only_and_requirements():
    loss, n = _as(np.ones((3, 2, 4)), [[0, 1], [1, 2]], labels=np.array([NEUTRAL, NEUTRAL]))
    assert n == 0 and loss.item() == 0.0
    with pytest.raises(ValueError):
        _as(np.ones((3, 2, 4)), [[0], [1]])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 10_000), st.floats(0.1, 50))
def test_as_reg_scale_invariant_and_identical_is_log_n(n, t, seed, scale):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((n, t, 4))
    idx = np.stack([rng.permutation(n)[:2] for _ in range(t)])
    labels = rng.choice([EEF, JOINT], size=t)
    a, _ = _as(h, idx, labels)
    b, _ = _as(h * scale, idx, labels)
    assert a.item() >= 0
    assert b.item() == pytest.approx(a.item(), rel=1e-9, abs=1e-12)
    same = np.broadcast_to(h[:1], h.shape)
    c, _ = _as(same, idx, labels)
    assert abs(c.item() - np.log(n)) < 1e-9


def test_as_reg_zero_output_is_guarded():
    h = np.zeros((3, 1, 4))
    loss, _ = _as(h, [[0, 1]])
    assert np.isfinite(loss.item())


def test_hb_reg_examples():
    s = Tensor(np.array([[0.9, 0.1]] * 4))
    assert hb_reg_layer(s, np.zeros((4, 1), dtype=int)).item() == pytest.approx(0.9, abs=1e-12)
    s = Tensor(np.array([[0.9, 0.1], [0.1, 0.9]]))
    assert hb_reg_layer(s, np.array([[0], [1]])).item() == pytest.approx(0.5, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 10), st.data())
def test_hb_reg_uniform_and_k_equals_n(n, u, data):
    k = data.draw(st.integers(1, n))
    # uniform scores: 1/N regardless of tie-breaking
    g = gate_from_logits(Tensor(np.zeros((u, n))), k)
    assert hb_reg_layer(g.scores, g.index).item() == pytest.approx(1 / n, abs=1e-15)
    logits = data.draw(st.lists(st.floats(-5, 5), min_size=u * n, max_size=u * n))
    g = gate_from_logits(Tensor(np.reshape(logits, (u, n))), n)
    assert hb_reg_layer(g.scores, g.index).item() == pytest.approx(1 / n, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(1, 6), st.integers(0, 10_000), st.data())
def test_hb_reg_permutation_invariant(n, u, seed, data):
    k = data.draw(st.integers(1, n))
    rng = np.random.default_rng(seed)
    g = gate_from_logits(Tensor(rng.standard_normal((u, n))), k)
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    a = hb_reg_layer(g.scores, g.index).item()
    b = hb_reg_layer(Tensor(g.scores.data[:, perm]), inv[g.index]).item()
    assert b == pytest.approx(a, abs=1e-15)


def test_hb_reg_averages_layers():
    g1 = gate_from_logits(Tensor(np.zeros((3, 4))), 2)
    g2 = gate_from_logits(Tensor(np.array([[9.0, 0, 0, 0]] * 3)), 1)
    want = (hb_reg_layer(g1.scores, g1.index).item() + hb_reg_layer(g2.scores, g2.index).item()) / 2
    assert hb_reg([g1, g2]).item() == pytest.approx(want, abs=1e-15)
    with pytest.raises(ValueError):
        hb_reg([])


def test_total_loss_examples():
    assert total_loss(1.0, 2.0, 3.0).total == pytest.approx(1.007, abs=1e-15)
    assert total_loss(1.3, 2.0, 3.0, 0.0, 0.0).total == 1.3
    a = total_loss(1.0, 2.0, 3.0, 0.5, 0.25).total
    b = total_loss(1.0, 4.0, 3.0, 0.5, 0.25).total
    assert b - a == pytest.approx(1.0)
    with pytest.raises(FloatingPointError):
        total_loss(float("nan"), 0.0, 0.0)


def test_total_gradient_with_pinned_routing():
    assert loss_gradient_error("total", max_coords=2, n_dirs=1) < 1e-4


def test_total_matches_components():
    _, part = pinned_loss_parts(seed=2)
    tot = part("total").item()
    want = part("flow").item() + 0.3 * part("as").item() / 2 + 0.7 * part("hb").item()
    assert tot == pytest.approx(want, rel=1e-12)
    with pytest.raises(ValueError):
        part("nope")
