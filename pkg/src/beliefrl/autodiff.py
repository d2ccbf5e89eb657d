"""Tape-based reverse-mode differentiation over small numpy arrays.

Only the primitives the policies and losses need are provided. Every op
checks whether any input requires a gradient; if none does, no closure is
stored, so the same forward code serves rollouts (no tape) and training.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ContractError(RuntimeError):
    """Raised when a caller breaks an operation's precondition."""


class NumericError(ValueError):
    """Raised on NaN/Inf where finite values are required."""


class Tape:
    def __init__(self) -> None:
        self.nodes: list[Var] = []
        self._leaves: dict[str, Var] = {}

    def leaf(self, name: str, value: np.ndarray) -> Var:
        # One leaf per parameter name per tape; repeated fetches share it.
        v = self._leaves.get(name)
        if v is None:
            v = Var(value, tape=self, requires_grad=True)
            v.name = name
            self._leaves[name] = v
        return v

    @property
    def leaves(self) -> dict[str, Var]:
        return self._leaves


class Var:
    __slots__ = ("value", "tape", "requires_grad", "parents", "backward_fn", "grad", "name")

    def __init__(self, value, tape: Tape | None = None, requires_grad: bool = False) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad
        self.parents: tuple[Var, ...] = ()
        self.backward_fn: Callable | None = None
        self.grad: np.ndarray | None = None
        self.name: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(value: np.ndarray, parents: Sequence, backward_fn: Callable) -> Var:
    parents = tuple(as_var(p) for p in parents)
    tape = None
    for p in parents:
        if p.requires_grad:
            tape = p.tape
            break
    if tape is None:
        return Var(value)
    out = Var(value, tape=tape, requires_grad=True)
    out.parents = parents
    out.backward_fn = backward_fn
    tape.nodes.append(out)
    return out


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def linear(x, weight, bias=None) -> Var:
    """x @ W.T + b for x of shape (..., in) and W of shape (out, in)."""
    x, weight = as_var(x), as_var(weight)
    xv, wv = x.value, weight.value
    if xv.shape[-1] != wv.shape[1]:
        raise ContractError(f"linear: input width {xv.shape[-1]} != weight in-dim {wv.shape[1]}")
    out = xv @ wv.T
    if bias is None:
        return _make(out, (x, weight), lambda g: (g @ wv, g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])))
    bias = as_var(bias)
    if bias.shape != (wv.shape[0],):
        raise ContractError(f"linear: bias shape {bias.shape} != ({wv.shape[0]},)")

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wv, g2.T @ xv.reshape(-1, xv.shape[-1]), g2.sum(axis=0)

    return _make(out + bias.value, (x, weight, bias), back)


def tanh(x) -> Var:
    x = as_var(x)
    y = np.tanh(x.value)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Var:
    x = as_var(x)
    y = _sigmoid(x.value)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def relu(x) -> Var:
    x = as_var(x)
    mask = (x.value > 0).astype(np.float64)
    return _make(x.value * mask, (x,), lambda g: (g * mask,))


def softplus(x) -> Var:
    x = as_var(x)
    v = x.value
    y = np.logaddexp(0.0, v)
    s = _sigmoid(v)
    return _make(y, (x,), lambda g: (g * s,))


def exp(x) -> Var:
    x = as_var(x)
    y = np.exp(x.value)
    return _make(y, (x,), lambda g: (g * y,))


def log(x) -> Var:
    x = as_var(x)
    v = x.value
    return _make(np.log(v), (x,), lambda g: (g / v,))


def logaddexp(a, b) -> Var:
    """log(e^a + e^b); either side may be -inf (an empty sum)."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    y = np.logaddexp(av, bv)
    wa = np.exp(av - y)
    wb = np.exp(bv - y)
    return _make(y, (a, b), lambda g: (_unbroadcast(g * wa, av.shape), _unbroadcast(g * wb, bv.shape)))


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    y = av / bv
    return _make(y, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * y / bv, bv.shape)))


def square(x) -> Var:
    x = as_var(x)
    v = x.value
    return _make(v * v, (x,), lambda g: (2.0 * g * v,))


def total(x) -> Var:
    x = as_var(x)
    shape = x.shape
    return _make(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_last(x) -> Var:
    x = as_var(x)
    shape = x.shape
    return _make(x.value.sum(axis=-1), (x,), lambda g: (np.broadcast_to(g[..., None], shape).copy(),))


def concat(parts: Sequence, axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.value for p in parts], axis=axis), parts, back)


def stack(parts: Sequence, axis: int = 0) -> Var:
    parts = [as_var(p) for p in parts]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([p.value for p in parts], axis=axis), parts, back)


def take(x, idx) -> Var:
    x = as_var(x)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.asarray(x.value[idx]), (x,), back)


def where(cond: np.ndarray, a, b) -> Var:
    """Select elementwise; `cond` is a constant boolean mask."""
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    c = np.asarray(cond, dtype=bool)
    return _make(
        np.where(c, a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(np.where(c, g, 0.0), sa), _unbroadcast(np.where(c, 0.0, g), sb)),
    )


def log_softmax(x) -> Var:
    x = as_var(x)
    v = x.value
    shifted = v - v.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x, eps: float = 1e-5) -> Var:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    x = as_var(x)
    v = x.value
    centered = v - v.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    y = centered * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (x,), back)


ACTIVATIONS = {"identity": None, "tanh": tanh, "relu": relu, "softplus": softplus}


def dense(x, weight, bias, activation: str = "identity") -> Var:
    if activation not in ACTIVATIONS:
        raise ContractError(f"unknown activation {activation!r}")
    y = linear(x, weight, bias)
    fn = ACTIVATIONS[activation]
    return y if fn is None else fn(y)


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every leaf on the tape.

    Leaves that did not take part in the loss get zeros.
    """
    if not isinstance(loss, Var) or loss.value.size != 1:
        raise ContractError("backward needs a scalar Var")
    if loss.tape is not tape or not loss.requires_grad:
        raise ContractError("loss was not recorded on this tape")
    for node in tape.nodes:
        node.grad = None
    for leaf in tape.leaves.values():
        leaf.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, grads):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=np.float64, copy=True).reshape(parent.shape)
            else:
                parent.grad += pg.reshape(parent.shape)
    return {
        name: (leaf.grad if leaf.grad is not None else np.zeros(leaf.shape))
        for name, leaf in tape.leaves.items()
    }
