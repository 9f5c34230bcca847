"""Minimal dense tensor with reverse-mode automatic differentiation.

Arrays are numpy-backed. Every op checks its output for NaN/Inf and raises
``FloatingPointError`` with the op name, so a bad step fails where it starts.

Default precision is float32; use ``precision(np.float64)`` for gradient
checks.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_STATE = {"dtype": np.float32, "grad": True}


def get_dtype():
    return _STATE["dtype"]


def set_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _STATE["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    old = _STATE["dtype"]
    set_dtype(dtype)
    try:
        yield
    finally:
        _STATE["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = old


def grad_enabled() -> bool:
    return _STATE["grad"]


class Tensor:
    """An n-d array plus an optional gradient accumulator.

    ``_backward`` maps the output gradient to a tuple of parent gradients
    (``None`` where a parent needs none). Leaves have ``_backward = None``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "version", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.version = 0
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def assign_(self, value) -> None:
        """In-place value update; bumps ``version`` so caches can detect it."""
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ValueError(f"assign_ shape {value.shape} != {self.data.shape}")
        self.data[...] = value
        self.version += 1

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{tag})"

    def backward(self, params: Iterable["Tensor"] | None = None) -> None:
        backward(self, params)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- shape / reductions ----------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _raise_nonscalar(t):
    raise ValueError(f"item() on non-scalar tensor of shape {t.shape}")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _const(x, like: np.ndarray):
    # python/numpy constants adopt the dtype of the tensor operand
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite value produced by op '{op}' (shape {np.shape(data)})")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.version = 0
    out._op = op
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b.data)
    if not isinstance(b, Tensor):
        b = _const(b, a.data)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b.data)
    if not isinstance(b, Tensor):
        b = _const(b, a.data)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b.data)
    if not isinstance(b, Tensor):
        b = _const(b, a.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b.data)
    if not isinstance(b, Tensor):
        b = _const(b, a.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw, "div")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 0.5 * (np.tanh(0.5 * x) + 1.0)
    return _make(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), "silu")


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.maximum(x, 0), (a,), lambda g: (g * (x > 0),), "relu")


# ---------------------------------------------------------------------------
# linear algebra, shapes, reductions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def _is_advanced(idx) -> bool:
    if isinstance(idx, tuple):
        return any(isinstance(i, (np.ndarray, list)) for i in idx)
    return isinstance(idx, (np.ndarray, list))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    advanced = _is_advanced(idx)
    out = a.data[idx]
    if advanced:
        out = np.ascontiguousarray(out)

    def bw(g):
        z = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(z, idx, g)
        else:
            z[idx] += g
        return (z,)

    return _make(np.asarray(out), (a,), bw, "getitem")


def scatter(values: Tensor, idx, shape) -> Tensor:
    """Place ``values`` at ``zeros(shape)[idx]``; positions must be disjoint."""
    z = np.zeros(shape, dtype=values.data.dtype)
    z[idx] = values.data
    return _make(z, (values,), lambda g: (np.ascontiguousarray(g[idx]),), "scatter")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(out, tuple(tensors), bw, "stack")


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------

def _masked_exp(x: np.ndarray, axis: int, mask):
    if mask is not None:
        if not mask.any(axis=axis).all():
            raise ValueError("softmax row with every position masked")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e, m


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None,
            sorted_sum: bool = False) -> Tensor:
    """Max-shifted softmax. ``mask`` False entries get probability exactly 0.

    ``sorted_sum`` sums the exponentials in ascending order so the result is
    bitwise independent of the order of entries along ``axis``.
    """
    e, _ = _masked_exp(a.data, axis, mask)
    if sorted_sum:
        z = np.sort(e, axis=axis).sum(axis=axis, keepdims=True)
    else:
        z = e.sum(axis=axis, keepdims=True)
    y = e / z

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    e, m = _masked_exp(a.data, axis, mask)
    z = e.sum(axis=axis, keepdims=True)
    x = a.data if mask is None else np.where(mask, a.data, 0.0)
    out = x - m - np.log(z)
    y = e / z

    def bw(g):
        gx = g - y * g.sum(axis=axis, keepdims=True)
        if mask is not None:
            gx = np.where(mask, gx, 0.0)
        return (gx,)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then scale/shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data if gamma is not None else None
    out = xhat * gd if gd is not None else xhat
    if beta is not None:
        out = out + beta.data
    def bw(g):
        gxhat = g * gd if gd is not None else g
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggamma = unbroadcast(g * xhat, gamma.shape) if gamma is not None else None
        gbeta = unbroadcast(g, beta.shape) if beta is not None else None
        return gx, ggamma, gbeta

    parents = (x, gamma if gamma is not None else _NONE, beta if beta is not None else _NONE)
    return _make(out, parents, bw, "layer_norm")


_NONE = Tensor(np.zeros(()), dtype=np.float64)


# ---------------------------------------------------------------------------
# selection (non-differentiable)
# ---------------------------------------------------------------------------

def topk(x, k: int, axis: int = -1):
    """Indices and values of the ``k`` largest entries along ``axis``.

    Results are ordered by value, descending; ties go to the lowest index.
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    n = x.shape[axis]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for length {n}")
    # stable sort on -x keeps lower indices first among equal values
    idx = np.argsort(-x, axis=axis, kind="stable")
    idx = np.take(idx, np.arange(k), axis=axis)
    return idx, np.take_along_axis(x, idx, axis=axis)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

@dataclass
class Graph:
    """Topologically ordered op records reachable from one output."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list:
        return [n for n in self.nodes if n._backward is None]


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Parameters listed in ``params`` that the loss does not reach get a zero
    gradient instead of ``None``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        graph = Graph.from_output(loss)
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(graph.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                if k in grads:
                    grads[k] = grads[k] + pg
                else:
                    grads[k] = pg
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def _rel_err(a, n):
    return np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-12)


def _central_diff(fn, flat, c, h, order):
    orig = flat[c]
    steps = (1.0, -1.0) if order == 2 else (2.0, 1.0, -1.0, -2.0)
    vals = []
    for s in steps:
        flat[c] = orig + s * h
        vals.append(fn().item())
    flat[c] = orig
    if order == 2:
        return (vals[0] - vals[1]) / (2 * h)
    # paired differences first: a flat direction then gives exactly 0
    return (8 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12 * h)


def grad_check(f: Callable, x, h: float = 1e-5, max_coords: int | None = None,
               seed: int = 0, order: int = 2) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``x`` is either an array (``f`` then takes one Tensor) or a Tensor / list
    of Tensors (``f`` then takes no arguments and reads them by closure).
    ``max_coords`` caps the coordinates checked per tensor, sampled with
    ``seed``; ``None`` checks every coordinate. ``order`` selects the 2-point
    or 4-point central stencil; the 4-point one tolerates a larger ``h``,
    which matters when a gradient is far below the loss value (the 2-point
    roundoff floor is about 1e-16 * |f| / h).
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if isinstance(x, Tensor):
        tensors, fn = [x], f
    elif isinstance(x, (list, tuple)) and x and all(isinstance(t, Tensor) for t in x):
        tensors, fn = list(x), f
    else:
        t = Tensor(x, requires_grad=True)
        tensors, fn = [t], (lambda: f(t))

    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss, tensors)
    analytic = [t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, ga in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for c in coords:
                num = _central_diff(fn, flat, c, h, order)
                worst = max(worst, float(_rel_err(ga.reshape(-1)[c], num)))
    return worst


def directional_grad_check(f: Callable, tensors: list, h: float = 1e-5,
                           n_dirs: int = 4, seed: int = 0) -> float:
    """Compare g·v with a central difference along random unit directions v.

    Each direction moves every coordinate of every tensor at once.
    """
    for t in tensors:
        t.grad = None
    backward(f(), tensors)
    analytic = [t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    origs = [t.data.copy() for t in tensors]
    worst = 0.0
    with no_grad():
        for _ in range(n_dirs):
            dirs = [rng.standard_normal(t.shape) for t in tensors]
            norm = np.sqrt(sum((d * d).sum() for d in dirs))
            dirs = [d / norm for d in dirs]
            vals = []
            for sign in (1.0, -1.0):
                for t, o, d in zip(tensors, origs, dirs):
                    t.data[...] = o + sign * h * d
                vals.append(f().item())
            for t, o in zip(tensors, origs):
                t.data[...] = o
            num = (vals[0] - vals[1]) / (2 * h)
            ana = float(sum((g * d).sum() for g, d in zip(analytic, dirs)))
            worst = max(worst, float(_rel_err(ana, num)))
    return worst
