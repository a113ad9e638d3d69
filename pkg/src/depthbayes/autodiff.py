"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation here dual-dispatches: called on plain arrays it returns a
plain array with zero tracing overhead; called with at least one
:class:`Node` it returns a Node carrying parent links and vector-Jacobian
closures. ``grad(output, leaves)`` walks the tape once.

Subgradient conventions used by the training loss: d|u|/du is 0 at u = 0,
and the spatial median routes its gradient to the middle order statistic
(half to each of the two middle elements for even counts).
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .tensor import ConvSpec
from .tensor import conv2d as _conv2d_raw

__all__ = [
    "Node",
    "absolute",
    "add",
    "conv2d",
    "divide",
    "exp",
    "grad",
    "leaf",
    "matmul",
    "mean",
    "median",
    "moveaxis",
    "multiply",
    "power",
    "reshape",
    "softmax",
    "softplus",
    "sqrt",
    "subtract",
    "tanh",
    "total",
    "upsample_nearest",
    "value_of",
]


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "parents", "vjps")
    __array_ufunc__ = None  # keep numpy from consuming Node operands

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjps = vjps

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)


def leaf(value) -> Node:
    """A differentiable graph input."""
    return Node(value)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _wrap(value, links):
    """Build a Node if any input was a Node; links = [(input, vjp), ...]."""
    traced = [(inp, vjp) for inp, vjp in links if isinstance(inp, Node)]
    if not traced:
        return value
    parents, vjps = zip(*traced)
    return Node(value, parents, vjps)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _wrap(out, [(a, lambda g: _unbroadcast(g, av.shape)),
                       (b, lambda g: _unbroadcast(g, bv.shape))])


def subtract(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return _wrap(out, [(a, lambda g: _unbroadcast(g, av.shape)),
                       (b, lambda g: _unbroadcast(-g, bv.shape))])


def multiply(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return _wrap(out, [(a, lambda g: _unbroadcast(g * bv, av.shape)),
                       (b, lambda g: _unbroadcast(g * av, bv.shape))])


def divide(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _wrap(out, [(a, lambda g: _unbroadcast(g / bv, av.shape)),
                       (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape))])


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("matmul supports 2-d operands only")
    out = av @ bv
    return _wrap(out, [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)])


def power(a, exponent):
    if isinstance(exponent, Node):
        raise ValueError("exponent must be a constant")
    av = value_of(a)
    out = av ** exponent
    return _wrap(out, [(a, lambda g: g * exponent * av ** (exponent - 1))])


def sqrt(a):
    av = value_of(a)
    out = np.sqrt(av)
    return _wrap(out, [(a, lambda g: g * 0.5 / out)])


def exp(a):
    av = value_of(a)
    out = np.exp(av)
    return _wrap(out, [(a, lambda g: g * out)])


def tanh(a):
    av = value_of(a)
    out = np.tanh(av)
    return _wrap(out, [(a, lambda g: g * (1.0 - out * out))])


def absolute(a):
    av = value_of(a)
    return _wrap(np.abs(av), [(a, lambda g: g * np.sign(av))])


def total(a, axis=None, keepdims=False):
    """Sum over ``axis`` (all elements when None)."""
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _wrap(out, [(a, vjp)])


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    if axis is None:
        count = av.size
    else:
        count = av.shape[axis]
    return multiply(total(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    av = value_of(a)
    out = av.reshape(shape)
    return _wrap(out, [(a, lambda g: g.reshape(av.shape))])


def moveaxis(a, source, destination):
    av = value_of(a)
    out = np.ascontiguousarray(np.moveaxis(av, source, destination))
    return _wrap(out, [(a, lambda g: np.moveaxis(g, destination, source))])


def softmax(a, axis=-1):
    av = value_of(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _wrap(out, [(a, vjp)])


def softplus(a):
    av = value_of(a)
    out = np.logaddexp(0.0, av)
    return _wrap(out, [(a, lambda g: g * expit(av))])


def median(a):
    """Spatial median over all elements; even counts average the middle pair."""
    av = value_of(a)
    flat = av.ravel()
    order = np.argsort(flat, kind="stable")
    n = flat.size
    if n % 2 == 1:
        picks, weights = [order[n // 2]], [1.0]
    else:
        picks, weights = [order[n // 2 - 1], order[n // 2]], [0.5, 0.5]
    out = float(sum(w * flat[p] for p, w in zip(picks, weights)))

    def vjp(g):
        gx = np.zeros(av.size)
        for p, w in zip(picks, weights):
            gx[p] += float(g) * w
        return gx.reshape(av.shape)

    return _wrap(np.asarray(out), [(a, vjp)])


def upsample_nearest(a, factor: int):
    """Nearest-neighbor upsampling of (c, h, w) by an integer factor."""
    av = value_of(a)
    c, h, w = av.shape
    out = np.repeat(np.repeat(av, factor, axis=1), factor, axis=2)

    def vjp(g):
        return g.reshape(c, h, factor, w, factor).sum(axis=(2, 4))

    return _wrap(out, [(a, vjp)])


def conv2d(x, kernel, spec: ConvSpec = ConvSpec(), bias=None):
    """Differentiable wrapper of :func:`depthbayes.tensor.conv2d`."""
    xv, kv = value_of(x), value_of(kernel)
    bv = None if bias is None else value_of(bias)
    out = _conv2d_raw(xv, kv, spec, bv)
    cin, h, w = xv.shape
    k1, k2 = kv.shape[2], kv.shape[3]
    hout, wout = out.shape[1], out.shape[2]
    ph, pw = spec.padding
    sh, sw = spec.stride

    def vjp_x(g):
        gp = np.zeros((cin, h + 2 * ph, w + 2 * pw))
        for a in range(k1):
            for b in range(k2):
                gp[:, a : a + sh * (hout - 1) + 1 : sh, b : b + sw * (wout - 1) + 1 : sw] += (
                    np.tensordot(kv[:, :, a, b], g, axes=(0, 0))
                )
        return gp[:, ph : ph + h, pw : pw + w]

    def vjp_kernel(g):
        padded = np.pad(xv, ((0, 0), (ph, ph), (pw, pw))) if ph or pw else xv
        gk = np.zeros_like(kv)
        for a in range(k1):
            for b in range(k2):
                window = padded[
                    :, a : a + sh * (hout - 1) + 1 : sh, b : b + sw * (wout - 1) + 1 : sw
                ]
                gk[:, :, a, b] = np.tensordot(g, window, axes=([1, 2], [1, 2]))
        return gk

    links = [(x, vjp_x), (kernel, vjp_kernel)]
    if bias is not None:
        links.append((bias, lambda g: g.sum(axis=(1, 2))))
    return _wrap(out, links)


def grad(output: Node, leaves) -> list[np.ndarray]:
    """Gradients of scalar ``output`` with respect to each leaf node.

    Unreached leaves get zero gradients.
    """
    if not isinstance(output, Node):
        raise TypeError("output does not depend on any traced input")

    topo: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(output): np.ones(output.value.shape)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contribution = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contribution
            else:
                grads[key] = contribution

    return [grads.get(id(lf), np.zeros(lf.value.shape)) for lf in leaves]
