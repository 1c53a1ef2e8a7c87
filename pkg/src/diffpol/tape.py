"""Minimal reverse-mode autodiff over numpy arrays.

The training losses in this package are all built from a fixed, small set of
operations: affine layers, Mish/ReLU, concatenation, elementwise arithmetic,
squared-error reductions and elementwise min/clip. A ``Tensor`` wraps an
ndarray together with a closure that knows how to push a gradient back to its
parents; ``backward`` walks the graph once in reverse topological order.

All arithmetic is float64. Leaves are plain ``Tensor(array)`` nodes; after
``backward`` their ``grad`` holds dL/dleaf (or ``None`` if the loss does not
depend on them).
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_bwd")

    def __init__(self, data, parents=(), bwd=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._bwd = bwd

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` to undo numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _acc(t: Tensor, g: np.ndarray):
    t.grad = g if t.grad is None else t.grad + g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return Tensor(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, -g)

    return Tensor(-a.data, (a,), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """a * c for a plain python/numpy scalar c (no gradient to c)."""
    c = float(c)

    def bwd(g):
        _acc(a, g * c)

    return Tensor(a.data * c, (a,), bwd)


def square(a: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, g * (2.0 * a.data))

    return Tensor(a.data * a.data, (a,), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w.T + b with x: (B, in), w: (out, in), b: (out,)."""
    out_data = x.data @ w.data.T + b.data

    def bwd(g):
        _acc(x, g @ w.data)
        _acc(w, g.T @ x.data)
        _acc(b, g.sum(axis=0))

    return Tensor(out_data, (x, w, b), bwd)


def mish(x: Tensor) -> Tensor:
    """x * tanh(softplus(x)); one exp per call, stable for large |x|."""
    u = np.exp(np.minimum(x.data, 40.0))
    w = (1.0 + u) ** 2
    tsp = (w - 1.0) / (w + 1.0)   # tanh(log(1 + e^x))
    sig = u / (1.0 + u)           # sigmoid(x)
    out_data = x.data * tsp

    def bwd(g):
        _acc(x, g * (tsp + x.data * (1.0 - tsp * tsp) * sig))

    return Tensor(out_data, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def bwd(g):
        _acc(x, g * mask)

    return Tensor(np.where(mask, x.data, 0.0), (x,), bwd)


def concat(parts: list[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    parts = [_as_tensor(p) for p in parts]
    widths = [p.data.shape[-1] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=-1)

    def bwd(g):
        ofs = 0
        for p, w in zip(parts, widths):
            _acc(p, g[..., ofs:ofs + w])
            ofs += w

    return Tensor(out_data, tuple(parts), bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; the gradient routes to the smaller input (ties to a)."""
    mask = a.data <= b.data

    def bwd(g):
        _acc(a, g * mask)
        _acc(b, g * ~mask)

    return Tensor(np.where(mask, a.data, b.data), (a, b), bwd)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        _acc(x, g * inside)

    return Tensor(np.clip(x.data, lo, hi), (x,), bwd)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        def bwd(g):
            _acc(x, np.broadcast_to(g, x.data.shape).copy())

        return Tensor(x.data.sum(), (x,), bwd)

    def bwd_axis(g):
        _acc(x, np.repeat(np.expand_dims(g, axis), x.data.shape[axis], axis=axis))

    return Tensor(x.data.sum(axis=axis), (x,), bwd_axis)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(g):
        _acc(x, np.broadcast_to(g / n, x.data.shape).copy())

    return Tensor(x.data.mean(), (x,), bwd)


def backward(root: Tensor):
    """Propagate dL/d(node) from a scalar root to every reachable node."""
    if root.data.shape != ():
        raise ShapeError(f"backward expects a scalar root, got shape {root.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)
