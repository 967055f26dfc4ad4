"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array. While a Tape is active, every operation whose
inputs include a recorded tensor or parameter is appended to the tape in
creation order. Creation order is already topological (an op's inputs exist
before the op runs), so a single reverse sweep propagates gradients and
visits each node exactly once.

Outside a tape context, operations compute plain values and record nothing,
which keeps evaluation-only passes cheap.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeError(AutodiffError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(AutodiffError):
    """An operation produced NaN or Inf. Carries the offending node name."""

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


_TAPES: list["Tape"] = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _check_finite(data, name):
    if not np.isfinite(data).all():
        raise NonFiniteError(
            f"non-finite values in {name or 'tensor'}", name=name
        )


class Tensor:
    """Dense float64 array plus an optional backward rule.

    `parents` and `_backward` exist only for op nodes recorded on a tape;
    leaves (parameters, constants) have neither.
    """

    __slots__ = ("data", "grad", "name", "parents", "_backward")

    def __init__(self, data, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, name)
        self.grad = None
        self.name = name
        tape = _active_tape()
        if parents and tape is not None:
            self.parents = parents
            self._backward = backward
            tape.record(self)
        else:
            self.parents = ()
            self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out = Tensor(a.data + b.data, (a, b), None)

        def backward(g):
            a.accumulate(_unbroadcast(g, a.data.shape))
            b.accumulate(_unbroadcast(g, b.data.shape))

        out._backward = backward
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out = Tensor(a.data * b.data, (a, b), None)

        def backward(g):
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

        out._backward = backward
        return out

    __rmul__ = __mul__

    def __neg__(self):
        a = self
        out = Tensor(-a.data, (a,), None)
        out._backward = lambda g: a.accumulate(-g)
        return out

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out = Tensor(a.data - b.data, (a, b), None)

        def backward(g):
            a.accumulate(_unbroadcast(g, a.data.shape))
            b.accumulate(_unbroadcast(-g, b.data.shape))

        out._backward = backward
        return out

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out = Tensor(a.data / b.data, (a, b), None)

        def backward(g):
            a.accumulate(_unbroadcast(g / b.data, a.data.shape))
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        out._backward = backward
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ShapeError("only scalar exponents are supported")
        a = self
        out = Tensor(a.data ** exponent, (a,), None)
        out._backward = lambda g: a.accumulate(
            g * exponent * a.data ** (exponent - 1)
        )
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if b.data.ndim != 2:
            raise ShapeError(f"matmul rhs must be 2-D, got shape {b.data.shape}")
        if a.data.ndim not in (1, 2) or a.data.shape[-1] != b.data.shape[0]:
            raise ShapeError(
                f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}"
            )
        out = Tensor(a.data @ b.data, (a, b), None)

        def backward(g):
            if a.data.ndim == 1:
                a.accumulate(g @ b.data.T)
                b.accumulate(np.outer(a.data, g))
            else:
                a.accumulate(g @ b.data.T)
                b.accumulate(a.data.T @ g)

        out._backward = backward
        return out

    # -- elementwise functions --------------------------------------------

    def exp(self):
        a = self
        out = Tensor(np.exp(a.data), (a,), None)
        out._backward = lambda g: a.accumulate(g * out.data)
        return out

    def log(self):
        a = self
        with np.errstate(divide="ignore", invalid="ignore"):
            out = Tensor(np.log(a.data), (a,), None)
        out._backward = lambda g: a.accumulate(g / a.data)
        return out

    def tanh(self):
        a = self
        out = Tensor(np.tanh(a.data), (a,), None)
        out._backward = lambda g: a.accumulate(g * (1.0 - out.data * out.data))
        return out

    def sigmoid(self):
        a = self
        out = Tensor(1.0 / (1.0 + np.exp(-a.data)), (a,), None)
        out._backward = lambda g: a.accumulate(g * out.data * (1.0 - out.data))
        return out

    def relu(self):
        a = self
        out = Tensor(np.maximum(a.data, 0.0), (a,), None)
        out._backward = lambda g: a.accumulate(g * (a.data > 0.0))
        return out

    def leaky_relu(self, alpha=0.01):
        a = self
        out = Tensor(np.where(a.data > 0.0, a.data, alpha * a.data), (a,), None)
        out._backward = lambda g: a.accumulate(
            g * np.where(a.data > 0.0, 1.0, alpha)
        )
        return out

    def clip(self, lo, hi):
        a = self
        out = Tensor(np.clip(a.data, lo, hi), (a,), None)
        out._backward = lambda g: a.accumulate(
            g * ((a.data >= lo) & (a.data <= hi))
        )
        return out

    # -- reductions and shape ops ------------------------------------------

    def sum(self, axis=None):
        a = self
        out = Tensor(a.data.sum(axis=axis), (a,), None)

        def backward(g):
            if axis is None:
                a.accumulate(np.broadcast_to(g, a.data.shape).copy())
            else:
                a.accumulate(
                    np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy()
                )

        out._backward = backward
        return out

    def mean(self, axis=None):
        a = self
        n = a.data.size if axis is None else a.data.shape[axis]
        out = Tensor(a.data.mean(axis=axis), (a,), None)

        def backward(g):
            if axis is None:
                a.accumulate(np.broadcast_to(g / n, a.data.shape).copy())
            else:
                a.accumulate(
                    np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape).copy()
                )

        out._backward = backward
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out = Tensor(a.data.reshape(shape), (a,), None)
        out._backward = lambda g: a.accumulate(g.reshape(a.data.shape))
        return out

    def __getitem__(self, key):
        a = self
        out = Tensor(a.data[key], (a,), None)
        advanced = _is_advanced_index(key)

        def backward(g):
            z = np.zeros_like(a.data)
            if advanced:
                np.add.at(z, key, g)
            else:
                z[key] += g
            a.accumulate(z)

        out._backward = backward
        return out

    def log_softmax(self, axis=-1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = Tensor(shifted - log_z, (a,), None)

        def backward(g):
            soft = np.exp(out.data)
            a.accumulate(g - soft * g.sum(axis=axis, keepdims=True))

        out._backward = backward
        return out

    def softmax(self, axis=-1):
        return self.log_softmax(axis=axis).exp()

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.data.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def stop_gradient(x):
    """Detach from the graph: same value, no backward path."""
    if isinstance(x, Tensor):
        return Tensor(x.data.copy())
    return Tensor(x)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(data, tuple(tensors), None)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t.accumulate(g[tuple(idx)])

    out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _is_advanced_index(key):
    if isinstance(key, (np.ndarray, list)):
        return True
    if isinstance(key, tuple):
        return any(isinstance(k, (np.ndarray, list)) for k in key)
    return False


class Tape:
    """Ordered record of operations; one reverse sweep per tape.

    Usage:
        with Tape() as tape:
            loss = ...
        grads = tape.gradients(loss, params)
    """

    def __init__(self):
        self.nodes = []
        self._swept = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def record(self, node):
        self.nodes.append(node)

    def backward(self, loss):
        """Seed the scalar loss and sweep the tape in reverse order."""
        if self._swept:
            raise AutodiffError("tape already swept; build a fresh tape")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ShapeError("backward requires a scalar loss tensor")
        self._swept = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)

    def gradients(self, loss, params):
        """Backward, then return one gradient array per parameter.

        Parameters that do not influence the loss get zero gradients. All
        intermediate grads are cleared so parameters stay reusable.
        """
        self.backward(loss)
        grads = []
        for p in params:
            grads.append(p.grad if p.grad is not None else np.zeros_like(p.data))
            p.grad = None
        for node in self.nodes:
            node.grad = None
            for parent in node.parents:
                parent.grad = None
        return grads
