"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records primitive operations as they execute (define-by-run).
Values that take part in differentiation are :class:`Var` objects; a ``Var``
with ``node is None`` is a constant and costs nothing to track.  Operations on
constants only are evaluated eagerly without touching any tape, so the same
code path serves inference and training.

Example
-------
>>> tape = Tape()
>>> x = tape.var(3.0)
>>> y = x * x
>>> tape.gradient(y, [x])[0]
array(6.)
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

# arccos is evaluated on a clamped argument so its slope stays finite at +-1.
ARCCOS_CLAMP = 1e-9
# Round-off slack accepted before an arccos argument is a domain error.
ARCCOS_TOL = 1e-6


class Var:
    """A float64 array, optionally attached to a node on a :class:`Tape`."""

    __slots__ = ("value", "tape", "node")
    __array_priority__ = 1000

    def __init__(self, value, tape: "Tape | None" = None, node: int | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "Var":
        return transpose(self)

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        tag = f"node={self.node}" if self.tracked else "const"
        return f"Var({self.value!r}, {tag})"

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("parents", "vjps")

    def __init__(self, parents: tuple[int, ...], vjps: tuple[Callable, ...]):
        self.parents = parents
        self.vjps = vjps


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations run, so parents always precede children
    and the backward sweep is a plain reverse iteration.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def var(self, value) -> Var:
        """Register ``value`` as a differentiable leaf."""
        node = len(self.nodes)
        self.nodes.append(_Node((), ()))
        v = Var(np.array(value, dtype=np.float64), self, node)
        self._leaves[node] = v.shape
        return v

    def _push(self, parents, vjps) -> int:
        self.nodes.append(_Node(tuple(parents), tuple(vjps)))
        return len(self.nodes) - 1

    def _sweep(self, root: Var) -> list:
        if root.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        grads: list = [None] * len(self.nodes)
        if not root.tracked:
            return grads
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        grads[root.node] = np.ones_like(root.value)
        for i in range(root.node, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if not node.parents:
                continue
            for p, vjp in zip(node.parents, node.vjps):
                gp = vjp(g)
                if grads[p] is None:
                    grads[p] = gp
                else:
                    grads[p] = grads[p] + gp
            grads[i] = None
        return grads

    def backward(self, root: Var) -> dict[int, np.ndarray]:
        """Gradient of ``root`` with respect to every leaf, keyed by node id.

        Leaves that ``root`` does not depend on map to zeros.
        """
        grads = self._sweep(root)
        out = {}
        for leaf, shape in self._leaves.items():
            g = grads[leaf]
            out[leaf] = np.zeros(shape) if g is None else np.broadcast_to(g, shape).copy()
        return out

    def gradient(self, root: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of ``root`` with respect to the leaves in ``wrt``."""
        grads = self._sweep(root)
        out = []
        for v in wrt:
            if v.tape is not self or v.node not in self._leaves:
                raise ValueError("gradient requested for a non-leaf or foreign value")
            g = grads[v.node]
            out.append(np.zeros_like(v.value) if g is None else np.broadcast_to(g, v.shape).copy())
        return out


# ---------------------------------------------------------------------------
# plumbing

def const(x) -> Var:
    """Wrap ``x`` as an untracked value."""
    if isinstance(x, Var):
        return Var(x.value)
    return Var(x)


def value(x) -> np.ndarray:
    """The numpy value of a Var or array-like."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _record(out: np.ndarray, inputs: Sequence, vjps: Sequence[Callable]) -> Var:
    tape = None
    parents, fns = [], []
    for x, f in zip(inputs, vjps):
        if isinstance(x, Var) and x.node is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands live on different tapes")
            parents.append(x.node)
            fns.append(f)
    if tape is None:
        return Var(out)
    return Var(out, tape, tape._push(parents, fns))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "add")
    return _record(av + bv, (a, b), (
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(g, bv.shape),
    ))


def sub(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "sub")
    return _record(av - bv, (a, b), (
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(-g, bv.shape),
    ))


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "mul")
    return _record(av * bv, (a, b), (
        lambda g: _unbroadcast(g * bv, av.shape),
        lambda g: _unbroadcast(g * av, bv.shape),
    ))


def div(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "div")
    if np.any(bv == 0):
        raise ZeroDivisionError("div: zero denominator")
    out = av / bv
    return _record(out, (a, b), (
        lambda g: _unbroadcast(g / bv, av.shape),
        lambda g: _unbroadcast(-g * out / bv, bv.shape),
    ))


def neg(a) -> Var:
    return _record(-_val(a), (a,), (lambda g: -g,))


def power(a, p: float) -> Var:
    av = _val(a)
    return _record(av ** p, (a,), (lambda g: g * p * av ** (p - 1),))


def square(a) -> Var:
    av = _val(a)
    return _record(av * av, (a,), (lambda g: 2.0 * g * av,))


def abs(a) -> Var:  # noqa: A001
    av = _val(a)
    # np.sign(0) == 0: subgradient 0 at the kink
    return _record(np.abs(av), (a,), (lambda g: g * np.sign(av),))


def exp(a) -> Var:
    out = np.exp(_val(a))
    return _record(out, (a,), (lambda g: g * out,))


def log(a) -> Var:
    av = _val(a)
    if np.any(av <= 0):
        raise ValueError("log: non-positive argument")
    return _record(np.log(av), (a,), (lambda g: g / av,))


def log1p(a) -> Var:
    av = _val(a)
    if np.any(av <= -1):
        raise ValueError("log1p: argument <= -1")
    return _record(np.log1p(av), (a,), (lambda g: g / (1.0 + av),))


def sqrt(a) -> Var:
    av = _val(a)
    if np.any(av <= 0):
        raise ValueError("sqrt: non-positive argument")
    out = np.sqrt(av)
    return _record(out, (a,), (lambda g: g * 0.5 / out,))


def clamp(a, lo=None, hi=None) -> Var:
    av = _val(a)
    out = np.clip(av, lo, hi)
    inside = np.ones(av.shape, dtype=bool)
    if lo is not None:
        inside &= av >= lo
    if hi is not None:
        inside &= av <= hi
    return _record(out, (a,), (lambda g: g * inside,))


def arccos(a) -> Var:
    """arccos of ``a`` clamped to ``[-1 + 1e-9, 1 - 1e-9]``.

    Arguments beyond ``[-1, 1]`` by more than round-off are rejected.  The
    clamp zeroes the gradient where it is active.
    """
    av = _val(a)
    if np.any(np.abs(av) > 1.0 + ARCCOS_TOL):
        raise ValueError("arccos: argument outside [-1, 1]")
    lim = 1.0 - ARCCOS_CLAMP
    c = np.clip(av, -lim, lim)
    inside = (av >= -lim) & (av <= lim)
    out = np.arccos(c)
    return _record(out, (a,), (lambda g: np.where(inside, -g / np.sqrt(1.0 - c * c), 0.0),))


def tanh(a) -> Var:
    out = np.tanh(_val(a))
    return _record(out, (a,), (lambda g: g * (1.0 - out * out),))


def softplus(a) -> Var:
    av = _val(a)
    out = np.logaddexp(0.0, av)
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    return _record(out, (a,), (lambda g: g * sig,))


def where(mask, a, b) -> Var:
    """Select from ``a`` where ``mask`` holds, else ``b``; ``mask`` is constant."""
    m = np.asarray(_val(mask), dtype=bool)
    av, bv = _val(a), _val(b)
    out = np.where(m, av, bv)
    return _record(out, (a, b), (
        lambda g: _unbroadcast(np.where(m, g, 0.0), av.shape),
        lambda g: _unbroadcast(np.where(m, 0.0, g), bv.shape),
    ))


# ---------------------------------------------------------------------------
# reductions and linear algebra

def sum(a, axis=None, keepdims=False) -> Var:  # noqa: A001
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape)

    return _record(out, (a,), (vjp,))


def mean(a, axis=None, keepdims=False) -> Var:
    av = _val(a)
    if axis is None:
        n = av.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([av.shape[i] for i in axes]))
    if n == 0:
        raise ValueError("mean of an empty array")
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def matmul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    if av.ndim == 0 or bv.ndim == 0:
        raise ValueError("matmul: scalar operand")
    try:
        out = av @ bv
    except ValueError:
        raise ValueError(f"matmul: incompatible shapes {av.shape} and {bv.shape}") from None
    a2 = av[None, :] if av.ndim == 1 else av
    b2 = bv[:, None] if bv.ndim == 1 else bv

    def g2(g):
        if av.ndim == 1:
            g = np.expand_dims(g, -2)
        if bv.ndim == 1:
            g = g[..., None]
        return g

    def vjp_a(g):
        ga = g2(g) @ np.swapaxes(b2, -1, -2)
        if av.ndim == 1:
            ga = ga[..., 0, :]
        return _unbroadcast(ga, av.shape)

    def vjp_b(g):
        gb = np.swapaxes(a2, -1, -2) @ g2(g)
        if bv.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(gb, bv.shape)

    return _record(out, (a, b), (vjp_a, vjp_b))


def trace(a) -> Var:
    """Trace over the last two axes."""
    av = _val(a)
    n = av.shape[-1]
    if av.ndim < 2 or av.shape[-2] != n:
        raise ValueError(f"trace: need square trailing axes, got {av.shape}")
    eye = np.eye(n)
    return _record(np.trace(av, axis1=-2, axis2=-1), (a,), (lambda g: np.asarray(g)[..., None, None] * eye,))


def cross(a, b) -> Var:
    """Cross product over the last axis (length 3)."""
    av, bv = _val(a), _val(b)
    if av.shape[-1] != 3 or bv.shape[-1] != 3:
        raise ValueError("cross: last axis must have length 3")
    _check_broadcast(av, bv, "cross")
    out = np.cross(av, bv)
    return _record(out, (a, b), (
        lambda g: _unbroadcast(np.cross(bv, g), av.shape),
        lambda g: _unbroadcast(np.cross(g, av), bv.shape),
    ))


def norm(a, axis=-1, keepdims=False) -> Var:
    av = _val(a)
    n = np.sqrt((av * av).sum(axis=axis, keepdims=True))
    if np.any(n == 0):
        raise ValueError("norm: zero vector has no gradient")
    out = n if keepdims else np.squeeze(n, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return g * av / n

    return _record(out, (a,), (vjp,))


def normalize(a, axis=-1) -> Var:
    """Unit vectors along ``axis``; zero-norm inputs are an error."""
    av = _val(a)
    n = np.sqrt((av * av).sum(axis=axis, keepdims=True))
    if np.any(n == 0):
        raise ValueError("normalize: zero-norm vector")
    u = av / n

    def vjp(g):
        return (g - u * (g * u).sum(axis=axis, keepdims=True)) / n

    return _record(u, (a,), (vjp,))


def softmax(a, axis=-1) -> Var:
    av = _val(a)
    e = np.exp(av - av.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _record(out, (a,), (lambda g: out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def cumsum(a, axis=0) -> Var:
    av = _val(a)

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)

    return _record(np.cumsum(av, axis=axis), (a,), (vjp,))


def segment_sum(a, segment_ids, num_segments: int) -> Var:
    """Sum rows of ``a`` (axis 0) into ``num_segments`` buckets."""
    av = _val(a)
    ids = np.asarray(segment_ids, dtype=np.intp)
    if ids.shape != av.shape[:1]:
        raise ValueError("segment_sum: one segment id per row required")
    flat = av.reshape(len(av), -1)
    out = np.zeros((num_segments, flat.shape[1]))
    for k in range(flat.shape[1]):
        out[:, k] = np.bincount(ids, weights=flat[:, k], minlength=num_segments)
    out = out.reshape((num_segments,) + av.shape[1:])
    return _record(out, (a,), (lambda g: g[ids],))


# ---------------------------------------------------------------------------
# shape manipulation

def getitem(a, idx) -> Var:
    """Index, slice or gather; backward scatters with accumulation."""
    av = _val(a)
    if isinstance(idx, Var):
        raise TypeError("index with a Var is not supported")
    out = av[idx]

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return full

    return _record(np.array(out), (a,), (vjp,))


def take(a, indices, axis=0) -> Var:
    """Gather along ``axis`` with integer ``indices``."""
    av = _val(a)
    ind = np.asarray(indices, dtype=np.intp)
    out = np.take(av, ind, axis=axis)

    def vjp(g):
        gm = np.moveaxis(g, axis, 0).reshape(ind.size, -1)
        n = av.shape[axis]
        acc = np.empty((n, gm.shape[1]))
        flat = ind.ravel()
        for k in range(gm.shape[1]):
            acc[:, k] = np.bincount(flat, weights=gm[:, k], minlength=n)
        moved = np.moveaxis(av, axis, 0).shape
        return np.moveaxis(acc.reshape(moved), 0, axis)

    return _record(out, (a,), (vjp,))


def reshape(a, shape) -> Var:
    av = _val(a)
    return _record(av.reshape(shape), (a,), (lambda g: g.reshape(av.shape),))


def transpose(a, axes=None) -> Var:
    av = _val(a)
    if axes is None:
        axes = tuple(reversed(range(av.ndim)))
    inv = np.argsort(axes)
    return _record(np.transpose(av, axes), (a,), (lambda g: np.transpose(g, inv),))


def swapaxes(a, i, j) -> Var:
    av = _val(a)
    return _record(np.swapaxes(av, i, j), (a,), (lambda g: np.swapaxes(g, i, j),))


def broadcast_to(a, shape) -> Var:
    av = _val(a)
    try:
        out = np.broadcast_to(av, shape)
    except ValueError:
        raise ValueError(f"broadcast_to: cannot broadcast {av.shape} to {shape}") from None
    return _record(np.array(out), (a,), (lambda g: _unbroadcast(g, av.shape),))


def expand_dims(a, axis) -> Var:
    av = _val(a)
    return _record(np.expand_dims(av, axis), (a,), (lambda g: g.reshape(av.shape),))


def concat(items: Sequence, axis=0) -> Var:
    vals = [_val(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def make(k):
        return lambda g: np.split(g, bounds, axis=axis)[k]

    return _record(out, items, [make(k) for k in range(len(items))])


def stack(items: Sequence, axis=0) -> Var:
    vals = [_val(x) for x in items]
    out = np.stack(vals, axis=axis)

    def make(k):
        return lambda g: np.take(g, k, axis=axis)

    return _record(out, items, [make(k) for k in range(len(items))])


# ---------------------------------------------------------------------------
# checks

def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def grad_check(f: Callable[..., Var], args: Iterable[np.ndarray], h: float = 1e-5) -> float:
    """Largest relative error between tape and finite-difference gradients.

    ``f`` maps Vars to a scalar Var.  The relative error of each argument is
    ``|g_tape - g_fd| / max(|g_fd|, |g_tape|, 1e-8)`` measured in the max norm.
    """
    args = [np.array(a, dtype=np.float64) for a in args]
    tape = Tape()
    leaves = [tape.var(a) for a in args]
    analytic = tape.gradient(f(*leaves), leaves)
    worst = 0.0
    for k, a in enumerate(args):
        def fk(xk, k=k):
            vals = list(args)
            vals[k] = xk
            return f(*[const(v) for v in vals]).item()

        fd = numeric_gradient(fk, a, h)
        scale = max(np.max(np.abs(fd), initial=0.0), np.max(np.abs(analytic[k]), initial=0.0), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic[k] - fd), initial=0.0) / scale))
    return worst
