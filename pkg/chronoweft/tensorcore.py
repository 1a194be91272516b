# tensorcore.py
# Small reverse-mode autodiff over numpy arrays (f64, up to 3 axes) and an
# Adam optimizer. Enough to train the reconstruction transformer on a CPU.

import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from chronoweft.errors import OptimizerError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

LN_EPS = 1e-5


class Tensor:
    """
    Dense array plus gradient bookkeeping.
    Ops on tensors that do not require grad record nothing, so the
    inference path never builds a graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        """
        Reverse pass from this node. `grad` seeds d(loss)/d(self); it may be
        omitted only for single-element tensors.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValidationError(f"backward() on non-scalar {self.shape} needs an explicit grad")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError("backward", grad.shape, self.shape)

        tape = build_tape(self)
        _accumulate(self, grad)
        for node in reversed(tape.nodes):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)
        return tape


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (reverse of numpy broadcasting)"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _result(data, parents, backward_fn, op):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


@dataclass
class Tape:
    """Nodes in topological order (inputs before outputs)"""

    nodes: list = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)


def build_tape(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return Tape(order)


# ------------------------
# Elementwise
# ------------------------
def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward_fn, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward_fn, "mul")


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def backward_fn(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), backward_fn, "scale")


def neg(a):
    return scale(a, -1.0)


def square(a):
    a = as_tensor(a)

    def backward_fn(g):
        _accumulate(a, 2.0 * a.data * g)

    return _result(a.data * a.data, (a,), backward_fn, "square")


def relu(a):
    a = as_tensor(a)
    positive = a.data > 0

    def backward_fn(g):
        _accumulate(a, g * positive)

    return _result(np.where(positive, a.data, 0.0), (a,), backward_fn, "relu")


# ------------------------
# Linear algebra
# ------------------------
def _swap_last(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    """2-D @ 2-D, batched 3-D @ 2-D (weight broadcast) or 3-D @ 3-D"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ _swap_last(b.data), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(_swap_last(a.data) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward_fn, "matmul")


def transpose(a):
    """Swap the last two axes"""
    a = as_tensor(a)

    def backward_fn(g):
        _accumulate(a, _swap_last(g))

    return _result(_swap_last(a.data), (a,), backward_fn, "transpose")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", tensors[0].shape, tensors[-1].shape)
    return _result(data, tuple(tensors), backward_fn, "concat")


# ------------------------
# Reductions
# ------------------------
def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward_fn, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ------------------------
# Normalization / regularization
# ------------------------
def softmax_rows(a):
    """Softmax over the last axis with max subtraction"""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        _accumulate(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (a,), backward_fn, "softmax")


def layer_norm(a, gain, bias, eps=LN_EPS):
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward_fn(g):
        if a.requires_grad:
            gx = g * gain.data
            _accumulate(a, inv_std * (
                gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            ))
        _accumulate(gain, _unbroadcast(g * xhat, gain.shape))
        _accumulate(bias, _unbroadcast(g, bias.shape))

    return _result(xhat * gain.data + bias.data, (a, gain, bias), backward_fn, "layer_norm")


def dropout(a, p, rng=None, training=True):
    """Inverted dropout; `rng` is a seed or numpy Generator. Identity when not training."""
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout rate must lie in [0, 1), got {p}")
    a = as_tensor(a)
    if not training or p == 0.0:
        return a
    keep = np.random.default_rng(rng).random(a.shape) >= p
    factor = keep / (1.0 - p)

    def backward_fn(g):
        _accumulate(a, g * factor)

    return _result(a.data * factor, (a,), backward_fn, "dropout")


# ------------------------
# Parameters and optimization
# ------------------------
def init_linear(fan_in, fan_out, rng):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, params, lr=1e-3):
        return cls(
            lr=lr,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params, grads, state):
    """
    One bias-corrected Adam update, applied in place to the arrays in `params`.
    All gradients are checked before any parameter moves.
    """
    for name, g in grads.items():
        if name not in params:
            raise ValidationError(f"gradient for unknown parameter '{name}'")
        if g.shape != params[name].shape:
            raise ShapeError(f"adam_step[{name}]", params[name].shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise OptimizerError(name)

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class Adam:
    """adam_step over a dict of named leaf tensors"""

    def __init__(self, params, lr=1e-3):
        self.params = params
        self.state = AdamState.fresh({k: t.data for k, t in params.items()}, lr=lr)

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def step(self):
        arrays = {k: t.data for k, t in self.params.items()}
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()}
        adam_step(arrays, grads, self.state)
