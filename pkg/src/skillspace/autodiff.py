"""Minimal dense-tensor reverse-mode autodiff on numpy arrays.

A `Tensor` wraps an ndarray value plus a gradient slot. Operations build a
graph of closures; `backward()` runs them in reverse topological order.
Python-number operands take a scalar fast path so float32 graphs stay
float32; tests build float64 graphs for finite-difference checks by using
float64 leaves.
"""

from __future__ import annotations

import numpy as np

_SCALARS = (int, float)


class AutodiffError(RuntimeError):
    pass


class Tensor:
    """Array value with a gradient slot and the closure that fills it."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward=None, name=""):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.value)

    def grad_or_zero(self):
        return self.grad if self.grad is not None else np.zeros_like(self.value)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.value.ndim != 0:
            raise AutodiffError("backward() requires a scalar loss, got shape %s" % (self.shape,))
        order = []
        seen = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=self.value.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return narrow(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    if isinstance(b, _SCALARS):
        out = Tensor(a.value + b, parents=(a,))

        def bwd(g):
            if a.requires_grad:
                a.accumulate(_unbroadcast(g, a.value.shape))

        out._backward = bwd
        return out
    out = Tensor(a.value + b.value, parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.value.shape))

    out._backward = bwd
    return out


def sub(a, b):
    if isinstance(b, _SCALARS):
        return add(a, -b)
    out = Tensor(a.value - b.value, parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.value.shape))

    out._backward = bwd
    return out


def mul(a, b):
    if isinstance(b, _SCALARS):
        out = Tensor(a.value * b, parents=(a,))

        def bwd(g):
            if a.requires_grad:
                a.accumulate(_unbroadcast(g * b, a.value.shape))

        out._backward = bwd
        return out
    out = Tensor(a.value * b.value, parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.value, b.value.shape))

    out._backward = bwd
    return out


def div(a, b):
    if isinstance(b, _SCALARS):
        return mul(a, 1.0 / b)
    out = Tensor(a.value / b.value, parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.value, a.value.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    out._backward = bwd
    return out


def matmul(a, b):
    if a.value.shape[-1] != b.value.shape[0]:
        raise AutodiffError(
            "matmul shape mismatch: %s @ %s" % (a.value.shape, b.value.shape)
        )
    out = Tensor(a.value @ b.value, parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.value.T)
        if b.requires_grad:
            bg = a.value.T @ g if a.value.ndim > 1 else np.outer(a.value, g)
            b.accumulate(bg)

    out._backward = bwd
    return out


def exp(a):
    out = Tensor(np.exp(a.value), parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * out.value)

    out._backward = bwd
    return out


def log(a):
    out = Tensor(np.log(a.value), parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g / a.value)

    out._backward = bwd
    return out


def sqrt(a):
    out = Tensor(np.sqrt(a.value), parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * 0.5 / out.value)

    out._backward = bwd
    return out


def square(a):
    out = Tensor(a.value * a.value, parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * 2.0 * a.value)

    out._backward = bwd
    return out


def tanh(a):
    out = Tensor(np.tanh(a.value), parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * (1.0 - out.value * out.value))

    out._backward = bwd
    return out


def relu(a):
    out = Tensor(np.maximum(a.value, 0.0), parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * (a.value > 0.0))

    out._backward = bwd
    return out


def elu(a, alpha=1.0):
    neg = alpha * (np.exp(np.minimum(a.value, 0.0)) - 1.0)
    pos_mask = a.value > 0.0
    out = Tensor(np.where(pos_mask, a.value, neg), parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * np.where(pos_mask, 1.0, neg + alpha))

    out._backward = bwd
    return out


def clip(a, lo, hi):
    """Clamp values; gradient passes only where lo < value < hi."""
    out = Tensor(np.clip(a.value, lo, hi), parents=(a,))
    inside = (a.value > lo) & (a.value < hi)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * inside)

    out._backward = bwd
    return out


def minimum(a, b):
    """Elementwise min of two tensors; ties send the gradient to a."""
    out = Tensor(np.minimum(a.value, b.value), parents=(a, b))
    take_a = a.value <= b.value

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * take_a, a.value.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * ~take_a, b.value.shape))

    out._backward = bwd
    return out


def maximum(a, b):
    """Elementwise max of two tensors; ties send the gradient to a."""
    out = Tensor(np.maximum(a.value, b.value), parents=(a, b))
    take_a = a.value >= b.value

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * take_a, a.value.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * ~take_a, b.value.shape))

    out._backward = bwd
    return out


def tsum(a, axis=None, keepdims=False):
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.value.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(ge, a.value.shape))

    out._backward = bwd
    return out


def tmean(a, axis=None, keepdims=False):
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=-1):
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        for t, gp in zip(tensors, parts):
            if t.requires_grad:
                t.accumulate(gp)

    out._backward = bwd
    return out


def narrow(a, idx):
    """Basic slicing/indexing with gradient scatter-add."""
    out = Tensor(a.value[idx], parents=(a,))

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.value)
            np.add.at(full, idx, g)
            a.accumulate(full)

    out._backward = bwd
    return out


def reshape(a, shape):
    out = Tensor(a.value.reshape(shape), parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.asarray(g).reshape(a.value.shape))

    out._backward = bwd
    return out


def logsumexp(a, axis=-1, keepdims=True):
    shift = np.max(a.value, axis=axis, keepdims=True)
    shifted = sub(a, Tensor(shift))
    s = tsum(exp(shifted), axis=axis, keepdims=True)
    out = add(log(s), Tensor(shift))
    if not keepdims:
        out = reshape(out, np.squeeze(out.value, axis=axis).shape)
    return out


def log_softmax(a, axis=-1):
    return sub(a, logsumexp(a, axis=axis, keepdims=True))
