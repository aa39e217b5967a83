"""Reverse-mode differentiation over the fixed op set the enhancement module uses.

A :class:`Var` wraps a float64 array and remembers how it was produced.
Forward values come from the kernels in :mod:`dualview.tensor`, so a graph
evaluated without calling :meth:`Var.backward` is the ordinary forward pass.
Gradients exist to be checked against central differences, see
:func:`grad_check`.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping

import numpy as np

from . import tensor as T
from .exceptions import NonFinite, ShapeMismatch


class Var:
    __array_priority__ = 100  # make ndarray <op> Var dispatch to Var

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        if self.data.size != 1:
            raise ShapeMismatch(f"backward needs a scalar output, got shape {self.shape}")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                stack.append((p, False))
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if p.requires_grad and g is not None:
                    p.grad += g

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)
    __neg__ = lambda self: mul(self, -1.0)
    __sub__ = lambda self, other: add(self, mul(other, -1.0))


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.data + b.data
    return Var(out, _parents=(a, b),
               _backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.data * b.data, _parents=(a, b),
               _backward=lambda g: (_unbroadcast(g * b.data, a.shape),
                                    _unbroadcast(g * a.data, b.shape)))


def maximum(a, b) -> Var:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_var(a), as_var(b)
    take_a = a.data >= b.data
    return Var(np.where(take_a, a.data, b.data), _parents=(a, b),
               _backward=lambda g: (_unbroadcast(np.where(take_a, g, 0.0), a.shape),
                                    _unbroadcast(np.where(take_a, 0.0, g), b.shape)))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def backward(g):
        ga = T.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = T.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Var(T.matmul(a.data, b.data), _parents=(a, b), _backward=backward)


def transpose(a) -> Var:
    """Swap the last two axes."""
    a = as_var(a)
    return Var(np.swapaxes(a.data, -1, -2), _parents=(a,),
               _backward=lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Var:
    a = as_var(a)
    return Var(a.data.reshape(shape), _parents=(a,), _backward=lambda g: (g.reshape(a.shape),))


def rearrange(a, fn: Callable[[np.ndarray], np.ndarray]) -> Var:
    """Apply an index-moving function ``fn`` (reshape/transpose/slicing) to ``a``.

    ``fn`` is traced once on an index array; the backward pass scatters
    gradients through the recorded indices.
    """
    a = as_var(a)
    index = fn(np.arange(a.data.size).reshape(a.shape))
    out = a.data.reshape(-1)[index]

    def backward(g):
        ga = np.zeros(a.data.size)
        np.add.at(ga, index.reshape(-1), g.reshape(-1))
        return (ga.reshape(a.shape),)

    return Var(out, _parents=(a,), _backward=backward)


def softmax_rows(a) -> Var:
    a = as_var(a)
    s = T.softmax_rows(a.data)
    return Var(s, _parents=(a,),
               _backward=lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def avg_pool(a, kh: int, kw: int) -> Var:
    a = as_var(a)

    def backward(g):
        up = np.repeat(np.repeat(g, kh, axis=-3), kw, axis=-2)
        return (up / (kh * kw),)

    return Var(T.avg_pool(a.data, kh, kw), _parents=(a,), _backward=backward)


def concat(parts, axis=-1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return Var(np.concatenate([p.data for p in parts], axis=axis), _parents=parts,
               _backward=lambda g: tuple(np.split(g, cuts, axis=axis)))


def linear(x, weight, bias=None) -> Var:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def conv3x3(x, weight, bias=None) -> Var:
    """Zero-padded 3x3 convolution of ``x (h, w, c_in)`` with ``weight (3, 3, c_in, c_out)``."""
    x, weight = as_var(x), as_var(weight)
    h, w, cin = x.shape
    if weight.shape[:3] != (3, 3, cin):
        raise ShapeMismatch(f"kernel {weight.shape} does not fit input channels {cin}")
    xp = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros((h, w, weight.shape[3]))
    for dy in range(3):
        for dx in range(3):
            out += T.matmul(xp[dy:dy + h, dx:dx + w], weight.data[dy, dx])

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        g2 = g.reshape(h * w, -1)
        for dy in range(3):
            for dx in range(3):
                gxp[dy:dy + h, dx:dx + w] += T.matmul(g, weight.data[dy, dx].T)
                patch = xp[dy:dy + h, dx:dx + w].reshape(h * w, cin)
                gw[dy, dx] = T.matmul(patch.T, g2)
        return gxp[1:-1, 1:-1], gw

    res = Var(out, _parents=(x, weight), _backward=backward)
    return res if bias is None else add(res, bias)


def total(a) -> Var:
    a = as_var(a)
    return Var(np.sum(a.data), _parents=(a,), _backward=lambda g: (np.broadcast_to(g, a.shape),))


@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    worst: tuple
    n_coords: int
    per_param: Dict[str, float] = field(default_factory=dict)

    def passed(self, tol=1e-3) -> bool:
        return self.max_rel_error < tol


def grad_check(f: Callable[[Dict[str, Var]], Var], params: Mapping[str, np.ndarray],
               h: float = 1e-4) -> GradCheckResult:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Var(v, requires_grad=True) for k, v in base.items()}
    out = f(leaves)
    if not np.all(np.isfinite(out.data)):
        raise NonFinite("objective is not finite at the base point")
    out.backward()

    def evaluate(name, idx, delta):
        arr = base[name].copy()
        arr[idx] += delta
        args = {k: Var(arr if k == name else v) for k, v in base.items()}
        val = float(f(args).data)
        if not np.isfinite(val):
            raise NonFinite(f"objective not finite after perturbing {name}{idx}")
        return val

    result = GradCheckResult(0.0, 0.0, (), 0)
    for name, arr in base.items():
        analytic = leaves[name].grad
        worst = 0.0
        for idx in np.ndindex(arr.shape):
            numeric = (evaluate(name, idx, h) - evaluate(name, idx, -h)) / (2 * h)
            a = float(analytic[idx])
            abs_err = abs(a - numeric)
            rel = abs_err / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
            result.max_abs_error = max(result.max_abs_error, abs_err)
            if rel > result.max_rel_error or not result.worst:
                result.max_rel_error = max(result.max_rel_error, rel)
                result.worst = (name, idx)
            result.n_coords += 1
        result.per_param[name] = worst
    return result
