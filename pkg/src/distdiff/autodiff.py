"""A small array-level reverse-mode differentiation tape.

Every op accepts plain arrays or :class:`Var` nodes. With no ``Var`` among the
inputs an op simply returns the numpy result, so the same loss code serves
both evaluation and differentiation.

Nodes are appended to their tape in creation order, which is already a
topological order; :meth:`Tape.gradients` walks it backwards once.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class Tape:
    """Records primitive ops. Not shareable across threads."""

    def __init__(self):
        self._nodes: list[Var] = []

    def leaf(self, value) -> "Var":
        v = Var(np.asarray(value), self, (), None)
        self._nodes.append(v)
        return v

    def record(self, value, parents: Sequence["Var"], vjp: Callable) -> "Var":
        v = Var(value, self, tuple(parents), vjp)
        self._nodes.append(v)
        return v

    def gradients(self, output: "Var", wrt: Sequence["Var"]) -> list[np.ndarray]:
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if np.size(output.value) != 1:
            raise ValueError("gradients() needs a scalar output")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            parent_grads = node.vjp(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not isinstance(p, Var):
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [grads.get(id(w), np.zeros_like(w.value)) for w in wrt]

    def __len__(self):
        return len(self._nodes)


class Var:
    __slots__ = ("value", "tape", "parents", "vjp")
    __array_priority__ = 1000

    def __init__(self, value, tape, parents, vjp):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

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
        return mul(self, 1.0 / np.asarray(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    out = value(a) + value(b)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(value(a)), np.shape(value(b))
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    out = value(a) - value(b)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(value(a)), np.shape(value(b))
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    va, vb = value(a), value(b)
    out = va * vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return tape.record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * vb, sa) if isinstance(a, Var) else None,
            _unbroadcast(g * va, sb) if isinstance(b, Var) else None,
        ),
    )


def matmul(a, b):
    va, vb = value(a), value(b)
    out = va @ vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(
        out,
        (a, b),
        lambda g: (
            g @ vb.T if isinstance(a, Var) else None,
            va.T @ g if isinstance(b, Var) else None,
        ),
    )


def linear(x, w, b):
    """``x @ w + b`` with ``b`` of shape (1, cols); one node instead of two."""
    vx, vw, vb = value(x), value(w), value(b)
    out = vx @ vw + vb
    tape = _tape_of(x, w, b)
    if tape is None:
        return out
    return tape.record(
        out,
        (x, w, b),
        lambda g: (
            g @ vw.T if isinstance(x, Var) else None,
            vx.T @ g if isinstance(w, Var) else None,
            g.sum(axis=0, keepdims=True) if isinstance(b, Var) else None,
        ),
    )


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x):
    """Tanh-approximated GELU.

    When recording, the derivative is formed during the forward pass with
    in-place updates; this op dominates the cost of a training step.
    """
    vx = value(x)
    tape = _tape_of(x)
    if tape is None:
        th = np.tanh(_GELU_C * (vx + _GELU_A * vx * vx * vx))
        return 0.5 * vx * (1.0 + th)
    ct = vx.dtype.type
    u = vx * vx
    th = np.multiply(u, ct(_GELU_C * _GELU_A))
    th += ct(_GELU_C)
    th *= vx
    np.tanh(th, out=th)
    half = th + ct(1.0)
    half *= ct(0.5)
    np.multiply(th, th, out=th)
    np.subtract(ct(1.0), th, out=th)
    # u becomes d gelu / dx = 0.5(1+th) + 0.5 x (1-th^2) C (1 + 3 A x^2)
    u *= ct(1.5 * _GELU_A * _GELU_C)
    u += ct(0.5 * _GELU_C)
    u *= vx
    u *= th
    u += half
    half *= vx
    return tape.record(half, (x,), lambda g: (g * u,))


def exp(x):
    out = np.exp(value(x))
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * out,))


def power(x, p: float):
    """Elementwise ``x**p`` for strictly positive ``x``."""
    vx = value(x)
    out = vx**p
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * p * vx ** (p - 1.0),))


def sum(x, axis=None):  # noqa: A001
    vx = value(x)
    out = vx.sum(axis=axis)
    tape = _tape_of(x)
    if tape is None:
        return out
    shape = vx.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return tape.record(out, (x,), vjp)


def mean(x, axis=None):
    vx = value(x)
    n = vx.size if axis is None else vx.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def reshape(x, shape):
    vx = value(x)
    out = vx.reshape(shape)
    tape = _tape_of(x)
    if tape is None:
        return out
    old = vx.shape
    return tape.record(out, (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence, axis: int = -1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape.record(out, tuple(xs), vjp)


def replicate(n: int, m: int, x):
    """Repeat each of the first ``n`` rows ``m`` times contiguously."""
    vx = value(x)
    if vx.shape[0] < n:
        raise ValueError(f"replicate needs at least {n} rows, got {vx.shape[0]}")
    rest = vx.shape[1:]
    out = np.repeat(vx[:n], m, axis=0)
    tape = _tape_of(x)
    if tape is None:
        return out
    full = vx.shape

    def vjp(g):
        gx = np.zeros(full, dtype=g.dtype)
        gx[:n] = g.reshape((n, m) + rest).sum(axis=1)
        return (gx,)

    return tape.record(out, (x,), vjp)


def sqnorm(x, axis=-1):
    vx = value(x)
    out = np.einsum("...i,...i->...", vx, vx) if axis in (-1, vx.ndim - 1) else (vx * vx).sum(axis=axis)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (2.0 * np.expand_dims(g, axis) * vx,))


def norm_pow(x, beta: float, axis=-1):
    """``||x||**beta`` along ``axis``; the derivative at ``x = 0`` is taken to be 0."""
    vx = value(x)
    sq = np.einsum("...i,...i->...", vx, vx) if axis in (-1, vx.ndim - 1) else (vx * vx).sum(axis=axis)
    if beta == 2.0:
        out = sq
    else:
        out = sq ** (0.5 * beta)
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        if beta == 2.0:
            coef = 2.0 * g
        else:
            pos = sq > 0.0
            safe = np.where(pos, sq, 1.0)
            coef = np.where(pos, beta * safe ** (0.5 * beta - 1.0), 0.0) * g
        return (np.expand_dims(coef, axis) * vx,)

    return tape.record(out, (x,), vjp)


def pairwise_diff(x):
    """For ``x`` of shape (n, m, d) return ``x[:, j] - x[:, k]`` with shape (n, m, m, d)."""
    vx = value(x)
    out = vx[:, :, None, :] - vx[:, None, :, :]
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g.sum(axis=2) - g.sum(axis=1),))


def grad(fn: Callable, *args):
    """Gradient of scalar ``fn(*vars)`` with respect to every positional array argument."""
    tape = Tape()
    leaves = [tape.leaf(np.asarray(a, dtype=float)) for a in args]
    out = fn(*leaves)
    if not isinstance(out, Var):
        return float(out), [np.zeros_like(np.asarray(a, dtype=float)) for a in args]
    return float(out.value), tape.gradients(out, leaves)
