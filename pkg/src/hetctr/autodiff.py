"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every node in creation order, so walking it
backwards is already a valid topological order. Each node keeps the
forward value and a closure that pushes its upstream gradient to its
parents. All arithmetic is float64.
"""
from __future__ import annotations

import numpy as np


class StaleTraceError(RuntimeError):
    """Raised when backward is asked to replay a trace whose parameters moved."""


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward_fn=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.value.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)


class Tape:
    """Ordered record of a forward computation.

    ``version`` is the parameter version the forward pass read; a later
    :meth:`backward` refuses to run if the owner has bumped it since.
    """

    _active: "Tape | None" = None

    def __init__(self, version=0):
        self.nodes: list[Tensor] = []
        self.version = version
        self.leaves: dict[str, Tensor] = {}

    def __enter__(self):
        self._previous = Tape._active
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = self._previous
        return False

    def leaf(self, name, value):
        node = Tensor(np.asarray(value, dtype=np.float64), name=name)
        self.leaves[name] = node
        return node

    def backward(self, seeds, current_version=None):
        """Accumulate gradients from ``seeds`` ({tensor: upstream}) into every node.

        Returns a dict mapping leaf name to its gradient (zeros if unreached).
        """
        if current_version is not None and current_version != self.version:
            raise StaleTraceError(
                f"trace recorded at parameter version {self.version}, "
                f"parameters are now at {current_version}"
            )
        for node in self.nodes:
            node.grad = None
        for leaf in self.leaves.values():
            leaf.grad = None
        for node, upstream in seeds.items():
            upstream = np.broadcast_to(np.asarray(upstream, dtype=np.float64), node.value.shape)
            node.grad = upstream.copy() if node.grad is None else node.grad + upstream
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                if g is None or not isinstance(parent, Tensor):
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        return {
            name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
            for name, leaf in self.leaves.items()
        }


def _record(value, parents, backward_fn):
    node = Tensor(value, parents, backward_fn)
    if Tape._active is not None:
        Tape._active.nodes.append(node)
    return node


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def constant(value):
    return Tensor(np.asarray(value, dtype=np.float64))


def add(a, b):
    av, bv = _val(a), _val(b)
    return _record(
        av + bv,
        (a, b),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
    )


def sub(a, b):
    av, bv = _val(a), _val(b)
    return _record(
        av - bv,
        (a, b),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
    )


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def matmul(a, b):
    av, bv = _val(a), _val(b)

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _record(av @ bv, (a, b), backward)


def exp(a):
    out = np.exp(_val(a))
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    av = _val(a)
    return _record(np.log(av), (a,), lambda g: (g / av,))


def relu(a):
    av = _val(a)
    on = av > 0
    return _record(np.where(on, av, 0.0), (a,), lambda g: (g * on,))


def softplus(a):
    av = _val(a)
    out = np.logaddexp(0.0, av)
    return _record(out, (a,), lambda g: (g / (1.0 + np.exp(-av)),))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    av = _val(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _record(av.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    av = _val(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    av = _val(a)
    return _record(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def swapaxes(a, i, j):
    return _record(np.swapaxes(_val(a), i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, index):
    av = _val(a)

    def backward(g):
        out = np.zeros_like(av)
        np.add.at(out, index, g)
        return (out,)

    return _record(av[index], (a,), backward)


def take_rows(table, index):
    """Embedding lookup: ``table[index]`` with scatter-add backward."""
    tv = _val(table)
    index = np.asarray(index)

    def backward(g):
        out = np.zeros_like(tv)
        np.add.at(out, index.reshape(-1), g.reshape(-1, tv.shape[-1]))
        return (out,)

    return _record(tv[index], (table,), backward)


def stack(tensors, axis=0):
    values = [_val(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(values)))

    return _record(np.stack(values, axis=axis), tuple(tensors), backward)


def concat(tensors, axis=0):
    values = [_val(t) for t in tensors]
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate(values, axis=axis), tuple(tensors), backward)


def softmax(a, axis=-1):
    av = _val(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), backward)


def log_softmax(a, axis=-1):
    av = _val(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    xv, gv = _val(x), _val(gain)
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gv + _val(bias)

    def backward(g):
        gxhat = g * gv
        dx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dgain = _unbroadcast(g * xhat, gv.shape)
        dbias = _unbroadcast(g, gv.shape)
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), backward)


def l2_normalize(a, axis=-1):
    av = _val(a)
    norm = np.sqrt((av * av).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise ValueError("cannot normalize a zero-norm vector")
    out = av / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _record(out, (a,), backward)
