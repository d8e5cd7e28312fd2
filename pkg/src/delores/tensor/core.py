"""Dense tensors with tape-based reverse-mode differentiation.

Ops append a record to the innermost active :class:`Tape` when at least one
input requires a gradient. ``backward`` walks the tape in reverse, pushes
gradients through each recorded rule and accumulates into the ``grad`` of
leaf tensors. A tape can be replayed only once.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..errors import NumericalError, ShapeError

_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside it are recorded::

        with Tape() as tape:
            loss = (x * x).sum()
        backward(loss, tape)
    """

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out, inputs, rule):
        self.records.append((out, inputs, rule))

    def backward(self, loss):
        backward(loss, self)


@contextlib.contextmanager
def no_grad():
    """Suspend recording (e.g. for frozen-encoder feature extraction)."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def _check_finite(data, op):
    # A finite sum implies finite entries unless the sum itself overflowed.
    if np.isfinite(data.sum()):
        return
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite values produced by {op}")


class Tensor:
    """A dense float array that can take part in a :class:`Tape`."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.is_leaf = True

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # -- arithmetic -------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def diagonal(self):
        return diagonal(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return power(self, 2)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data, inputs, rule, op):
    """Wrap ``data`` as an op output and record ``rule`` if a tape wants it.

    ``rule(g)`` must return one gradient (or None) per entry of ``inputs``.
    """
    _check_finite(data, op)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(out, inputs, rule)
    return out


def backward(loss, tape):
    """Populate ``grad`` on every leaf reachable from scalar ``loss``."""
    if tape.consumed:
        raise RuntimeError("backward() called twice on the same tape")
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape.consumed = True
    stack = _tape_stack()
    if tape in stack:
        stack.remove(tape)
    grads = {id(loss): np.ones_like(loss.data)}
    if loss.is_leaf and loss.requires_grad:
        loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + grads[id(loss)]
    records = tape.records
    tape.records = []
    while records:
        out, inputs, rule = records.pop()
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = rule(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"gradient shape {gi.shape} != tensor shape {t.shape}")
            if t.is_leaf:
                if t.grad is None:
                    t.grad = gi.copy()
                else:
                    t.grad += gi
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


# -- generic ops -------------------------------------------------------------

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
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add",
    )


def sub(a, b):
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        a = as_tensor(a, like=b)
    else:
        b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub",
    )


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data
    return make_result(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul",
    )


def div(a, b):
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        a = as_tensor(a, like=b)
    else:
        b = as_tensor(b, like=a)
    ad, bd = a.data, b.data
    out = ad / bd

    def rule(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))

    return make_result(out, (a, b), rule, "div")


def power(a, p):
    p = float(p)
    ad = a.data
    if p == 2.0:
        return make_result(ad * ad, (a,), lambda g: (g * 2.0 * ad,), "square")
    return make_result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "power")


def sqrt(a):
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tsum(a, axis=None, keepdims=False):
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(out, (a,), rule, "sum")


def tmean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))
    return make_result(
        np.ascontiguousarray(np.transpose(a.data, axes)), (a,),
        lambda g: (np.ascontiguousarray(np.transpose(g, inv)),), "transpose",
    )


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def diagonal(a):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diagonal expects a square matrix, got {a.shape}")
    n = a.shape[0]
    dt = a.dtype

    def rule(g):
        out = np.zeros((n, n), dtype=dt)
        out[np.arange(n), np.arange(n)] = g
        return (out,)

    return make_result(np.diagonal(a.data).copy(), (a,), rule, "diagonal")
