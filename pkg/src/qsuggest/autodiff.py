"""Reverse-mode differentiation over numpy arrays.

A deliberately small op vocabulary: exactly what the encoder/attention/
decoder stack needs, nothing more.  Every value is a float64 ndarray
(scalars have shape ()).  Graphs are per-example and single-threaded;
nothing here touches global state, so independent examples can be built
and differentiated concurrently.

Gradient buffers are never mutated in place after creation, which makes
aliasing between a node's grad and its parent's contribution safe.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError

# Toggle for the per-op finite guard.  Kept on by default; arrays here are
# small enough that the cost is negligible at desk scale.
FINITE_CHECKS = True


def _ensure_finite(value: np.ndarray) -> None:
    # sum() is non-finite iff any element is (inf + -inf yields nan).
    if FINITE_CHECKS and value.size and not np.isfinite(value.sum()):
        raise NumericError("non-finite value produced by a numeric op")


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_bw")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple = (),
        bw: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool = False,
    ):
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._bw = bw

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def leaf(value) -> Var:
    """A differentiable input (a parameter binding)."""
    arr = _as_array(value)
    _ensure_finite(arr)
    return Var(arr, requires_grad=True)


def const(value) -> Var:
    """A non-differentiable input."""
    arr = _as_array(value)
    _ensure_finite(arr)
    return Var(arr)


def _node(value: np.ndarray, parents: tuple, bw) -> Var:
    _ensure_finite(value)
    req = any(p.requires_grad for p in parents)
    return Var(value, parents, bw if req else None, req)


def _acc(p: Var, g: np.ndarray) -> None:
    if not p.requires_grad:
        return
    p.grad = g if p.grad is None else p.grad + g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Var, b: Var) -> Var:
    """Elementwise add; also supports (n,d)+(d,) bias rows and scalar+array."""
    out = a.value + b.value

    def bw(g):
        if a.value.shape == out.shape:
            _acc(a, g)
        elif a.value.shape == ():
            _acc(a, g.sum())
        else:  # (d,) broadcast over rows
            _acc(a, g.sum(axis=0))
        if b.value.shape == out.shape:
            _acc(b, g)
        elif b.value.shape == ():
            _acc(b, g.sum())
        else:
            _acc(b, g.sum(axis=0))

    return _node(out, (a, b), bw)


def sub(a: Var, b: Var) -> Var:
    out = a.value - b.value
    if a.value.shape != b.value.shape and b.value.shape != () and a.value.shape != ():
        raise ValueError("sub requires matching shapes or a scalar operand")

    def bw(g):
        _acc(a, g if a.value.shape == out.shape else g.sum())
        _acc(b, -g if b.value.shape == out.shape else -g.sum())

    return _node(out, (a, b), bw)


def mul(a: Var, b: Var) -> Var:
    """Elementwise product; either operand may be a scalar."""
    out = a.value * b.value

    def bw(g):
        ga = g * b.value
        gb = g * a.value
        _acc(a, ga if a.value.shape == out.shape else ga.sum())
        _acc(b, gb if b.value.shape == out.shape else gb.sum())

    return _node(out, (a, b), bw)


def div(a: Var, b: Var) -> Var:
    """Elementwise quotient; denominator may be a scalar."""
    out = a.value / b.value

    def bw(g):
        ga = g / b.value
        gb = -g * a.value / (b.value * b.value)
        _acc(a, ga if a.value.shape == out.shape else ga.sum())
        _acc(b, gb if b.value.shape == out.shape else gb.sum())

    return _node(out, (a, b), bw)


def neg(a: Var) -> Var:
    return _node(-a.value, (a,), lambda g: _acc(a, -g))


def scale(a: Var, c: float) -> Var:
    return _node(a.value * c, (a,), lambda g: _acc(a, g * c))


def add_const(a: Var, c: float) -> Var:
    return _node(a.value + c, (a,), lambda g: _acc(a, g))


def rsub(c: float, a: Var) -> Var:
    """c - a for a plain float c."""
    return _node(c - a.value, (a,), lambda g: _acc(a, -g))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Var, b: Var) -> Var:
    """Matrix/vector product covering 2d@2d, 2d@1d, 1d@2d and 1d@1d."""
    out = a.value @ b.value
    an, bn = a.value.ndim, b.value.ndim

    def bw(g):
        if an == 2 and bn == 2:
            _acc(a, g @ b.value.T)
            _acc(b, a.value.T @ g)
        elif an == 2 and bn == 1:
            _acc(a, np.outer(g, b.value))
            _acc(b, a.value.T @ g)
        elif an == 1 and bn == 2:
            _acc(a, b.value @ g)
            _acc(b, np.outer(a.value, g))
        else:  # dot product
            _acc(a, g * b.value)
            _acc(b, g * a.value)

    return _node(np.asarray(out, dtype=np.float64), (a, b), bw)


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """x @ w.T (+ b) with w of shape (out_dim, in_dim); x is (n,in) or (in,)."""
    out = x.value @ w.value.T
    if b is not None:
        out = out + b.value

    def bw(g):
        if x.value.ndim == 2:
            _acc(x, g @ w.value)
            _acc(w, g.T @ x.value)
            if b is not None:
                _acc(b, g.sum(axis=0))
        else:
            _acc(x, g @ w.value)
            _acc(w, np.outer(g, x.value))
            if b is not None:
                _acc(b, g)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bw)


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)

    def bw(g):
        _acc(a, g * (1.0 - out * out))

    return _node(out, (a,), bw)


def sigmoid(a: Var) -> Var:
    x = a.value
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = np.asarray(out, dtype=np.float64)

    def bw(g):
        _acc(a, g * out * (1.0 - out))

    return _node(out, (a,), bw)


def log(a: Var) -> Var:
    out = np.log(a.value)

    def bw(g):
        _acc(a, g / a.value)

    return _node(out, (a,), bw)


def exp(a: Var) -> Var:
    out = np.exp(a.value)

    def bw(g):
        _acc(a, g * out)

    return _node(out, (a,), bw)


def softmax(a: Var) -> Var:
    """Stable softmax over a 1-d vector of logits."""
    x = a.value
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    shifted = x - x.max()
    e = np.exp(shifted)
    out = e / e.sum()

    def bw(g):
        _acc(a, out * (g - np.dot(g, out)))

    return _node(out, (a,), bw)


# ---------------------------------------------------------------------------
# shape manipulation


def sumv(a: Var) -> Var:
    out = np.asarray(a.value.sum(), dtype=np.float64)

    def bw(g):
        _acc(a, np.full_like(a.value, float(g)))

    return _node(out, (a,), bw)


def concat(parts: Sequence[Var]) -> Var:
    """Concatenate 1-d vectors."""
    out = np.concatenate([p.value for p in parts])
    sizes = [p.value.shape[0] for p in parts]

    def bw(g):
        off = 0
        for p, s in zip(parts, sizes):
            _acc(p, g[off:off + s])
            off += s

    return _node(out, tuple(parts), bw)


def stack_rows(rows: Sequence[Var]) -> Var:
    """Stack 1-d vectors into a (n, d) matrix."""
    out = np.stack([r.value for r in rows])

    def bw(g):
        for i, r in enumerate(rows):
            _acc(r, g[i])

    return _node(out, tuple(rows), bw)


def row(m: Var, i: int) -> Var:
    """One row of a (n, d) matrix as a (d,) vector."""
    out = m.value[i]

    def bw(g):
        gm = np.zeros_like(m.value)
        gm[i] = g
        _acc(m, gm)

    return _node(out, (m,), bw)


def prepend_row(v: Var, m: Var) -> Var:
    """Stack a (d,) vector on top of a (n, d) matrix, giving (n+1, d)."""
    out = np.concatenate([v.value[None, :], m.value], axis=0)

    def bw(g):
        _acc(v, g[0])
        _acc(m, g[1:])

    return _node(out, (v, m), bw)


def gather_rows(m: Var, idx: np.ndarray) -> Var:
    """Select rows of a matrix (embedding lookup); idx is an int array."""
    idx = np.asarray(idx, dtype=np.intp)
    out = m.value[idx]

    def bw(g):
        gm = np.zeros_like(m.value)
        np.add.at(gm, idx, g)
        _acc(m, gm)

    return _node(out, (m,), bw)


def gather(v: Var, idx: np.ndarray) -> Var:
    """Select elements of a 1-d vector."""
    idx = np.asarray(idx, dtype=np.intp)
    out = v.value[idx]

    def bw(g):
        gv = np.zeros_like(v.value)
        np.add.at(gv, idx, g)
        _acc(v, gv)

    return _node(out, (v,), bw)


def at(v: Var, i: int) -> Var:
    """A single element of a 1-d vector, as a scalar Var."""
    out = np.asarray(v.value[i], dtype=np.float64)

    def bw(g):
        gv = np.zeros_like(v.value)
        gv[i] = g
        _acc(v, gv)

    return _node(out, (v,), bw)


def dropout(a: Var, rate: float, rng: np.random.Generator) -> Var:
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return a
    mask = (rng.random(a.value.shape) >= rate) / (1.0 - rate)
    return mul(a, const(mask))


# ---------------------------------------------------------------------------
# fused recurrent cell

GRU_PARAM_NAMES = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wn", "Un", "bn")


def gru_step(x: Var, h: Var, cell: dict) -> Var:
    """One GRU update.

    z = sigma(Wz x + Uz h + bz)        update gate
    r = sigma(Wr x + Ur h + br)        reset gate
    c = tanh(Wn x + Un (r*h) + bn)     candidate
    h' = z*h + (1-z)*c

    Fused into a single graph node with a hand-derived backward pass; the
    finite-difference suite pins its correctness.
    """
    Wz, Uz, bz = cell["Wz"], cell["Uz"], cell["bz"]
    Wr, Ur, br = cell["Wr"], cell["Ur"], cell["br"]
    Wn, Un, bn = cell["Wn"], cell["Un"], cell["bn"]
    xv, hv = x.value, h.value

    az = Wz.value @ xv + Uz.value @ hv + bz.value
    ar = Wr.value @ xv + Ur.value @ hv + br.value
    z = 1.0 / (1.0 + np.exp(-az))
    r = 1.0 / (1.0 + np.exp(-ar))
    rh = r * hv
    an = Wn.value @ xv + Un.value @ rh + bn.value
    c = np.tanh(an)
    out = z * hv + (1.0 - z) * c

    def bw(g):
        dz = g * (hv - c)
        daz = dz * z * (1.0 - z)
        dc = g * (1.0 - z)
        dan = dc * (1.0 - c * c)
        drh = Un.value.T @ dan
        dr = drh * hv
        dar = dr * r * (1.0 - r)

        _acc(Wz, np.outer(daz, xv))
        _acc(Uz, np.outer(daz, hv))
        _acc(bz, daz)
        _acc(Wr, np.outer(dar, xv))
        _acc(Ur, np.outer(dar, hv))
        _acc(br, dar)
        _acc(Wn, np.outer(dan, xv))
        _acc(Un, np.outer(dan, rh))
        _acc(bn, dan)
        if x.requires_grad:
            _acc(x, Wz.value.T @ daz + Wr.value.T @ dar + Wn.value.T @ dan)
        if h.requires_grad:
            _acc(h, g * z + Uz.value.T @ daz + Ur.value.T @ dar + drh * r)

    parents = (x, h, Wz, Uz, bz, Wr, Ur, br, Wn, Un, bn)
    return _node(out, parents, bw)


# ---------------------------------------------------------------------------
# backward driver


def backward(root: Var) -> None:
    """Populate .grad for every differentiable ancestor of a scalar root.

    Safe to call repeatedly on overlapping graphs: each call resets the
    grads of the subgraph it reaches before propagating.
    """
    if root.value.shape != ():
        raise ValueError("backward requires a scalar root")

    topo: list[Var] = []
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    for v in topo:
        v.grad = None
    root.grad = np.ones((), dtype=np.float64)
    for v in reversed(topo):
        if v._bw is not None and v.grad is not None:
            v._bw(v.grad)
