"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records primitives as they execute. Every node stores the op
kind, the ids of its inputs and its forward value; ids are assigned in
execution order, so inputs always precede outputs and a backward sweep in
reverse id order visits each node exactly once.

Elementwise ops follow numpy broadcasting; the gradient is summed back to
each input's shape.

>>> tape = Tape()
>>> x = tape.var(3.0)
>>> y = x * x
>>> grads = tape.backward(y)
>>> float(x.grad)
6.0
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError", "Tape", "Var", "primitive", "finite_diff_check",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "sin", "cos",
    "power", "softplus", "sigmoid", "sum", "mean", "matvec", "matmul",
    "concat", "clamp_min", "abs", "reshape", "take", "custom",
]


class AutodiffError(ValueError):
    """Raised on shape mismatches, bad roots and non-finite checks."""


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    requires_grad: bool


@dataclass
class Tape:
    nodes: list[_Node] = field(default_factory=list)

    def _push(self, op, inputs, value, vjp, requires_grad) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node(op, tuple(inputs), value, vjp, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def var(self, value) -> "Var":
        """A differentiable leaf."""
        return self._push("leaf", (), np.array(value, dtype=np.float64), None, True)

    def const(self, value) -> "Var":
        return self._push("const", (), np.asarray(value, dtype=np.float64), None, False)

    def lift(self, x) -> "Var":
        if isinstance(x, Var):
            if x.tape is not self:
                raise AutodiffError("Var belongs to a different tape")
            return x
        return self.const(x)

    def backward(self, root: "Var") -> dict[int, np.ndarray]:
        """Accumulate d(root)/d(leaf) into every leaf's ``grad``.

        Gradients are re-zeroed first, so repeated calls give identical
        results. Returns ``{leaf_id: grad}``.
        """
        if root.tape is not self:
            raise AutodiffError("root belongs to a different tape")
        if self.nodes[root.id].value.size != 1:
            raise AutodiffError(
                f"backward needs a scalar root, got shape {root.shape}")
        adj: list[np.ndarray | None] = [None] * (root.id + 1)
        adj[root.id] = np.ones_like(self.nodes[root.id].value)
        for nid in range(root.id, -1, -1):
            g = adj[nid]
            node = self.nodes[nid]
            if g is None or node.vjp is None or not node.requires_grad:
                continue
            in_grads = node.vjp(g)
            for iid, ig in zip(node.inputs, in_grads):
                if ig is None or not self.nodes[iid].requires_grad:
                    continue
                if adj[iid] is None:
                    adj[iid] = np.asarray(ig, dtype=np.float64)
                else:
                    adj[iid] = adj[iid] + ig
        grads = {}
        for nid, node in enumerate(self.nodes):
            if node.op != "leaf":
                continue
            g = adj[nid] if nid <= root.id else None
            grads[nid] = np.zeros_like(node.value) if g is None else g.reshape(node.value.shape)
        self._grads = grads
        return grads


class Var:
    """Handle to one tape node."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000
    __array_ufunc__ = None

    def __init__(self, tape: Tape, nid: int):
        self.tape = tape
        self.id = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray | None:
        grads = getattr(self.tape, "_grads", None)
        if grads is None:
            return None
        if self.id in grads:
            return grads[self.id]
        return np.zeros_like(self.value)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return take(self, idx)

    def sum(self, axis=None): return sum(self, axis)
    def mean(self, axis=None): return mean(self, axis)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self): return transpose(self)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise AutodiffError("at least one operand must be a Var")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, *vals):
    try:
        return np.broadcast_shapes(*(v.shape for v in vals))
    except ValueError:
        shapes = ", ".join(str(v.shape) for v in vals)
        raise AutodiffError(f"{op}: incompatible shapes {shapes}") from None


def _binary(op, a, b, fwd, vjp_a, vjp_b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    _check_broadcast(op, av, bv)
    out = fwd(av, bv)

    ra, rb = tape.nodes[a.id].requires_grad, tape.nodes[b.id].requires_grad

    def vjp(g):
        return (_unbroadcast(vjp_a(g, av, bv, out), av.shape) if ra else None,
                _unbroadcast(vjp_b(g, av, bv, out), bv.shape) if rb else None)

    rg = ra or rb
    return tape._push(op, (a.id, b.id), out, vjp, rg)


def _unary(op, x, fwd, dfn) -> Var:
    tape = _tape_of(x)
    xv = x.value
    out = fwd(xv)

    def vjp(g):
        return (g * dfn(xv, out),)

    return tape._push(op, (x.id,), out, vjp, tape.nodes[x.id].requires_grad)


def add(a, b):
    return _binary("add", a, b, np.add,
                   lambda g, a, b, o: g, lambda g, a, b, o: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract,
                   lambda g, a, b, o: g, lambda g, a, b, o: -g)


def mul(a, b):
    return _binary("mul", a, b, np.multiply,
                   lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)


def div(a, b):
    return _binary("div", a, b, np.divide,
                   lambda g, a, b, o: g / b, lambda g, a, b, o: -g * o / b)


def neg(x):
    return _unary("neg", x, np.negative, lambda x, o: -1.0)


def exp(x):
    return _unary("exp", x, np.exp, lambda x, o: o)


def log(x):
    return _unary("log", x, np.log, lambda x, o: 1.0 / x)


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda x, o: 0.5 / o)


def sin(x):
    return _unary("sin", x, np.sin, lambda x, o: np.cos(x))


def cos(x):
    return _unary("cos", x, np.cos, lambda x, o: -np.sin(x))


def abs(x):
    # subgradient 0 at the kink
    return _unary("abs", x, np.abs, lambda x, o: np.sign(x))


def softplus(x):
    """Overflow-safe ``max(x, 0) + log1p(exp(-|x|))``."""
    tape = _tape_of(x)
    xv = x.value
    out = np.abs(xv, out=np.empty_like(xv))
    np.negative(out, out=out)
    np.exp(out, out=out)
    np.log1p(out, out=out)
    out += np.maximum(xv, 0.0)

    def vjp(g):
        # g * sigmoid(x); exp(-x) may overflow to inf, which gives the right 0
        with np.errstate(over="ignore"):
            t = np.negative(xv, out=np.empty_like(xv))
            np.exp(t, out=t)
            t += 1.0
            np.divide(g, t, out=t)
        return (t,)

    return tape._push("softplus", (x.id,), out, vjp, tape.nodes[x.id].requires_grad)


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(x):
    return _unary("sigmoid", x, _sigmoid, lambda x, o: o * (1.0 - o))


def clamp_min(x, lo: float):
    return _unary("clamp_min", x, lambda v: np.maximum(v, lo),
                  lambda v, o: (v > lo).astype(np.float64))


def power(x, p: float):
    if isinstance(p, Var):
        raise AutodiffError("power: exponent must be a constant")
    p = float(p)
    return _unary("power", x, lambda v: np.power(v, p),
                  lambda v, o: p * np.power(v, p - 1.0))


def sum(x, axis=None):
    tape = _tape_of(x)
    xv = x.value
    out = np.sum(xv, axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape),)

    return tape._push("sum", (x.id,), out, vjp, tape.nodes[x.id].requires_grad)


def mean(x, axis=None):
    n = x.value.size if axis is None else np.prod(
        [x.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis) * (1.0 / n)


def matvec(m, v):
    tape = _tape_of(m, v)
    m, v = tape.lift(m), tape.lift(v)
    mv, vv = m.value, v.value
    if mv.ndim != 2 or vv.ndim != 1 or mv.shape[1] != vv.shape[0]:
        raise AutodiffError(f"matvec: incompatible shapes {mv.shape}, {vv.shape}")
    out = mv @ vv

    def vjp(g):
        return np.outer(g, vv), mv.T @ g

    rg = tape.nodes[m.id].requires_grad or tape.nodes[v.id].requires_grad
    return tape._push("matvec", (m.id, v.id), out, vjp, rg)


def matmul(a, b):
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    if bv.ndim == 1:
        if av.ndim == 2:
            return matvec(a, b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise AutodiffError(f"matmul: incompatible shapes {av.shape}, {bv.shape}")
    out = av @ bv
    ra, rb = tape.nodes[a.id].requires_grad, tape.nodes[b.id].requires_grad

    def vjp(g):
        return (g @ bv.T if ra else None), (av.T @ g if rb else None)

    rg = ra or rb
    return tape._push("matmul", (a.id, b.id), out, vjp, rg)


def concat(xs: Sequence, axis: int = -1):
    tape = _tape_of(*xs)
    xs = [tape.lift(x) for x in xs]
    vals = [x.value for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        shapes = ", ".join(str(v.shape) for v in vals)
        raise AutodiffError(f"concat: incompatible shapes {shapes}") from None
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return np.split(g, splits, axis=axis)

    rg = any(tape.nodes[x.id].requires_grad for x in xs)
    return tape._push("concat", [x.id for x in xs], out, vjp, rg)


def reshape(x, shape):
    tape = _tape_of(x)
    xv = x.value
    out = xv.reshape(shape)
    return tape._push("reshape", (x.id,), out,
                      lambda g: (g.reshape(xv.shape),),
                      tape.nodes[x.id].requires_grad)


def transpose(x):
    tape = _tape_of(x)
    return tape._push("transpose", (x.id,), x.value.T,
                      lambda g: (g.T,), tape.nodes[x.id].requires_grad)


def take(x, idx):
    """Basic or integer-array indexing; repeated indices accumulate."""
    tape = _tape_of(x)
    xv = x.value
    out = xv[idx]

    def vjp(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, idx, g)
        return (gx,)

    return tape._push("take", (x.id,), np.array(out), vjp, tape.nodes[x.id].requires_grad)


def custom(name: str, inputs: Sequence, value, vjp) -> Var:
    """Register a fused op with a hand-written vector-Jacobian product.

    ``vjp(g)`` must return one gradient (or ``None``) per input.
    """
    tape = _tape_of(*inputs)
    inputs = [tape.lift(x) for x in inputs]
    rg = any(tape.nodes[x.id].requires_grad for x in inputs)
    return tape._push(name, [x.id for x in inputs], value, vjp, rg)


_PRIMS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "exp": exp,
    "log": log, "sqrt": sqrt, "sin": sin, "cos": cos, "power": power,
    "softplus": softplus, "sigmoid": sigmoid, "sum": sum, "matvec": matvec,
    "matmul": matmul, "concat": lambda *xs, axis=-1: concat(xs, axis),
    "clamp_min": clamp_min, "abs": abs,
}


def primitive(op_kind: str, inputs: Sequence, **attrs) -> Var:
    """Dispatch by op name, e.g. ``primitive("mul", [x, x])``."""
    try:
        fn = _PRIMS[op_kind]
    except KeyError:
        raise AutodiffError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **attrs)


def gradient(f: Callable[[Tape, Var], Var], at) -> np.ndarray:
    """Analytic gradient of a scalar ``f(tape, x)`` at ``at``."""
    tape = Tape()
    x = tape.var(np.array(at, dtype=np.float64))
    root = f(tape, x)
    tape.backward(root)
    return x.grad


def finite_diff_check(f: Callable[[Tape, Var], Var], at, step: float = 1e-5,
                      analytic: np.ndarray | None = None) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` builds a scalar from a leaf; the error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise AutodiffError("step must be positive")
    at = np.array(at, dtype=np.float64)
    if analytic is None:
        analytic = gradient(f, at)

    def fval(p):
        t = Tape()
        v = float(np.asarray(f(t, t.var(p)).value).reshape(()))
        if not np.isfinite(v):
            raise AutodiffError("f returned a non-finite value")
        return v

    flat = at.reshape(-1)
    num = np.empty_like(flat)
    for i in range(flat.size):
        hi = flat.copy(); hi[i] += step
        lo = flat.copy(); lo[i] -= step
        num[i] = (fval(hi.reshape(at.shape)) - fval(lo.reshape(at.shape))) / (2 * step)
    ana = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(ana)):
        raise AutodiffError("analytic gradient is non-finite")
    return float(np.max(np.abs(ana - num) / np.maximum(1.0, np.abs(ana)), initial=0.0))
