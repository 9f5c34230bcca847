import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from himoe import tensor as T
from himoe.tensor import Graph, Tensor, backward, grad_check, layer_norm, precision, softmax, topk


@pytest.fixture(autouse=True)
def f64():
    with precision(np.float64):
        yield


def test_matmul_identity_and_hand_value():
    m = np.array([[3.0, -1.0], [0.5, 2.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ Tensor(m)).data, m)
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[5.0], [6.0]])
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_matches_fd():
    rng = np.random.default_rng(0)
    b = Tensor(rng.standard_normal((3, 2)))
    assert grad_check(lambda a: (a @ b).sum(), rng.standard_normal((4, 3)), h=1e-5) < 1e-8
    a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    (a @ b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((4, 2)) @ b.data.T)


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    np.testing.assert_allclose(softmax(Tensor([2.0, 1.0, 0.0, -1.0])).data,
                               [0.6439, 0.2369, 0.0871, 0.0321], atol=1e-4)
    x = np.array([0.3, -2.0, 5.0])
    np.testing.assert_allclose(softmax(Tensor(x)).data, softmax(Tensor(x + 100)).data, atol=1e-15)


def test_softmax_mask_and_overflow():
    out = softmax(Tensor([1000.0, 0.0, 5.0]), mask=np.array([True, False, True]))
    assert out.data[1] == 0.0
    assert abs(out.data.sum() - 1) < 1e-12
    with pytest.raises(ValueError):
        softmax(Tensor([1.0, 2.0]), mask=np.array([False, False]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
              elements=st.floats(-30, 30)),
       st.floats(-50, 50))
def test_softmax_sums_to_one_and_shift_invariant(x, c):
    s = softmax(Tensor(x), axis=-1).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(softmax(Tensor(x + c), axis=-1).data, s, atol=1e-6)


def test_layer_norm_examples():
    np.testing.assert_array_equal(layer_norm(Tensor([[4.0, 4.0, 4.0]])).data, [[0.0, 0.0, 0.0]])
    np.testing.assert_allclose(layer_norm(Tensor([[1.0, -1.0]]), eps=0.0).data, [[1.0, -1.0]])
    np.testing.assert_allclose(layer_norm(Tensor([[1.0, -1.0]])).data, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_gradient():
    rng = np.random.default_rng(1)
    gamma = Tensor(rng.standard_normal(5), requires_grad=True)
    beta = Tensor(rng.standard_normal(5), requires_grad=True)
    w = rng.standard_normal((3, 5))
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    f = lambda: (layer_norm(x, gamma, beta) * Tensor(w)).sum()
    assert grad_check(f, [x, gamma, beta]) < 1e-4


def test_topk_examples():
    assert list(topk(np.array([0.1, 0.9, 0.5]), 1)[0]) == [1]
    assert list(topk(np.array([0.5, 0.5, 0.2]), 1)[0]) == [0]
    assert set(topk(np.array([2.0, 1.0, 0.0, -1.0]), 2)[0]) == {0, 1}
    idx, vals = topk(np.array([2.0, 1.0, 0.0, -1.0]), 2)
    np.testing.assert_array_equal(vals, [2.0, 1.0])


@pytest.mark.parametrize("k", [0, 4])
def test_topk_range(k):
    with pytest.raises(ValueError):
        topk(np.array([1.0, 2.0, 3.0]), k)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=10).map(np.array), st.data())
def test_topk_permutation_consistent(x, data):
    k = data.draw(st.integers(1, len(x)))
    perm = np.array(data.draw(st.permutations(range(len(x)))))
    idx, vals = topk(x.astype(float), k)
    pidx, pvals = topk(x[perm].astype(float), k)
    assert sorted(vals) == sorted(pvals)
    assert sorted(x[perm][pidx]) == sorted(x[idx])
    # ties resolve to the lowest index among equals
    for r in range(1, k):
        if vals[r] == vals[r - 1]:
            assert idx[r] > idx[r - 1]


def test_backward_examples():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
    y = Tensor([1.0, 2.0], requires_grad=True)
    z = Tensor([3.0], requires_grad=True)
    backward((z * 2.0).sum(), [y, z])
    np.testing.assert_array_equal(y.grad, [0.0, 0.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_is_an_error():
    with pytest.raises(FloatingPointError):
        T.log(Tensor([0.0, 1.0]))
    with pytest.raises(FloatingPointError):
        Tensor([1.0]) / Tensor([0.0])


def test_graph_is_topologically_ordered():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = a * 3.0
    c = (b + a).sum()
    g = Graph.from_output(c)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    for n in g.nodes:
        for p in n._parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(n)]


def test_grad_check_examples():
    assert grad_check(lambda x: (x * x).sum(), np.array([1.0]), h=1e-5) < 1e-8
    rng = np.random.default_rng(2)
    labels = np.array([0, 2, 1])
    f = lambda z: -T.log_softmax(z, axis=-1)[np.arange(3), labels].mean()
    z0 = rng.standard_normal((3, 4))
    assert grad_check(f, z0, h=1e-5) < 1e-6
    assert grad_check(f, z0, h=1e-4) < 1e-6


def test_default_precision_is_32_bit():
    with precision(np.float32):
        assert Tensor([1.0]).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


UNARY = {
    "exp": lambda t: T.exp(t * 0.3),
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "silu": T.silu,
    "sqrt": lambda t: T.sqrt(t * t + 1.0),
    "log": lambda t: T.log(t * t + 1.0),
    "power": lambda t: T.power(t * t + 1.0, 1.5),
    "div": lambda t: t / (t * t + 2.0),
    "softmax": lambda t: softmax(t, axis=-1),
    "log_softmax": lambda t: T.log_softmax(t, axis=-1),
    "layer_norm": lambda t: layer_norm(t),
    "transpose": lambda t: t.transpose(),
    "mean": lambda t: t.mean(axis=0, keepdims=True),
    "getitem": lambda t: t[::2],
    "concat": lambda t: T.concat([t, t * 2.0], axis=-1),
    "stack": lambda t: T.stack([t, t * t], axis=0),
}


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(sorted(UNARY)), st.integers(1, 8), st.integers(2, 8), st.integers(0, 2**31))
def test_primitive_backward_matches_fd(op, n, m, seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(UNARY[op](Tensor(np.zeros((n, m)))).shape)
    f = lambda x: (UNARY[op](x) * Tensor(w)).sum()
    assert grad_check(f, rng.standard_normal((n, m)), h=1e-6) < 1e-4


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_broadcast_binary_backward(n, m, p, seed):
    rng = np.random.default_rng(seed)
    b = Tensor(rng.standard_normal((1, m)), requires_grad=True)
    c = Tensor(rng.standard_normal((m, p)), requires_grad=True)
    a = Tensor(rng.standard_normal((n, m)), requires_grad=True)
    f = lambda: (((a - b) * b + a / (b * b + 1.0)) @ c).sum()
    assert grad_check(f, [a, b, c], h=1e-6) < 1e-4


def test_scatter_and_advanced_getitem_backward():
    rng = np.random.default_rng(3)
    v = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    idx = (np.array([0, 2, 1]), np.array([1, 0, 1]))
    w = rng.standard_normal((3, 2, 2))
    assert grad_check(lambda: (T.scatter(v, idx, (3, 2, 2)) * Tensor(w)).sum(), [v]) < 1e-6
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    rows = np.array([0, 0, 3])
    assert grad_check(lambda: (x[rows, np.array([1, 1, 2])] ** 2).sum(), [x]) < 1e-6
