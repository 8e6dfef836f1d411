"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` records the op that produced it together with a closure
that pushes its output gradient into the parents. ``backward`` walks the
graph in reverse topological order. Every op result is checked for
non-finite entries.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, NonFiniteError


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Args:
        data: array-like, converted to a float64 ndarray.
        requires_grad: whether ``backward`` should populate ``grad``.
        name: optional label, used by parameter containers and error messages.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, name=None, *, _parents=(), _op=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = None
        self.op = _op

    # -- basic array protocol -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, op={self.op})"

    def zero_grad(self):
        self.grad = None

    # -- graph machinery ------------------------------------------------------
    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this tensor.

        ``grad`` defaults to ones for scalar outputs; non-scalar outputs need
        an explicit seed of matching shape.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() on a non-scalar tensor needs an explicit grad")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise ContractError(f"seed grad shape {grad.shape} != tensor shape {self.data.shape}")

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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            _check_finite(g, f"gradient of {node.op or node.name or 'leaf'}")
            if node._backward is None:
                node._accumulate(g)
                continue
            if not node._parents:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar -------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data, parents, backward, op):
    """Wrap an op output; attach ``backward`` only if a parent needs grads."""
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward, "mul")


def square(a):
    a = as_tensor(a)
    def backward(g):
        return (2.0 * a.data * g,)

    return make_result(a.data * a.data, (a,), backward, "square")


def relu(a):
    """max(0, x); the derivative at exactly 0 is taken as 0."""
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return make_result(np.where(mask, a.data, 0.0), (a,), backward, "relu")


def tsum(a, axis=None):
    a = as_tensor(a)
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return make_result(np.sum(a.data, axis=axis), (a,), backward, "sum")


def mean(a):
    a = as_tensor(a)
    n = a.data.size

    def backward(g):
        return (np.full(a.shape, float(g) / n),)

    return make_result(np.mean(a.data), (a,), backward, "mean")


def reshape(a, shape):
    a = as_tensor(a)
    def backward(g):
        return (g.reshape(a.shape),)

    return make_result(a.data.reshape(shape), (a,), backward, "reshape")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def take_rows(a, idx):
    """Row gather ``a[idx]`` along axis 0; repeated indices accumulate in backward."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return make_result(a.data[idx], (a,), backward, "take_rows")
