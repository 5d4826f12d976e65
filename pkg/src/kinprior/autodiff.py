"""Minimal reverse-mode automatic differentiation.

A :class:`Tape` records every primitive applied to a :class:`Var` together
with the vector-Jacobian product of that primitive. Values may be Python
floats or numpy arrays; array operations are elementwise with numpy
broadcasting, and the scalar case is just the zero-dimensional one.

The module-level functions (:func:`sin`, :func:`sqrt`, :func:`clamp`, ...)
accept plain numbers and arrays as well as :class:`Var`, so model code can be
written once and run either with or without a tape.

Example:
    >>> grad(lambda x, y: sin(x) * y, [0.0, 5.0])
    [5.0, 0.0]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteForward

# Added under the root in the derivative of sqrt only; sqrt(0) itself stays 0.
SQRT_EPS = 1e-12


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index")
    # make numpy arrays and scalars defer to Var's reflected operators
    __array_ufunc__ = None

    def __init__(self, value, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    def __repr__(self):
        return f"Var({self.value!r}, index={self.index})"

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Tape:
    """Append-only record of primitive operations.

    Nodes are appended in evaluation order, so the list is already a
    topological order and the backward pass simply walks it in reverse.
    """

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[tuple[Callable, ...]] = []
        self._shapes: list[tuple[int, ...]] = []
        self._ops: list[str] = []

    def __len__(self):
        return len(self._ops)

    def variable(self, value) -> Var:
        """Create an input (leaf) variable."""
        value = np.asarray(value, dtype=float)
        if value.ndim == 0:
            value = float(value)
        return self._record("input", value, (), ())

    def _record(self, op, value, parents, vjps) -> Var:
        if not np.all(np.isfinite(value)):
            raise NonFiniteForward(f"non-finite value produced by '{op}' at tape node {len(self._ops)}")
        self._parents.append(tuple(p.index for p in parents))
        self._vjps.append(tuple(vjps))
        self._shapes.append(np.shape(value))
        self._ops.append(op)
        return Var(value, self, len(self._ops) - 1)

    def backward(self, out: Var, seed=None) -> list:
        """Return adjoints for every node (``None`` where unreachable)."""
        if out.tape is not self:
            raise ValueError("output was not recorded on this tape")
        grads: list = [None] * len(self._ops)
        grads[out.index] = np.ones(np.shape(out.value)) if seed is None else np.asarray(seed, dtype=float)
        for i in range(out.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            for parent, vjp in zip(self._parents[i], self._vjps[i]):
                contrib = vjp(g)
                if grads[parent] is None:
                    grads[parent] = contrib
                else:
                    grads[parent] = grads[parent] + contrib
        return grads

    def gradient(self, out: Var, wrt: Sequence[Var]) -> list:
        grads = self.backward(out)
        result = []
        for v in wrt:
            g = grads[v.index]
            if g is None:
                g = np.zeros(self._shapes[v.index])
            g = np.asarray(g, dtype=float).reshape(self._shapes[v.index])
            result.append(float(g) if g.ndim == 0 else g)
        return result


def value(x):
    """Strip a :class:`Var` down to its numeric value."""
    return x.value if isinstance(x, Var) else x


def is_var(x) -> bool:
    return isinstance(x, Var)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _unary(name, x, fwd, deriv):
    if not isinstance(x, Var):
        return fwd(x)
    with np.errstate(all="ignore"):
        v = fwd(x.value)
        d = deriv(x.value, v)
    return x.tape._record(name, v, (x,), (lambda g: g * d,))


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    out = av + bv
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        sa = np.shape(av)
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(g, sa))
    if isinstance(b, Var):
        sb = np.shape(bv)
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(g, sb))
    return tape._record("add", out, parents, vjps)


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    out = av - bv
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        sa = np.shape(av)
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(g, sa))
    if isinstance(b, Var):
        sb = np.shape(bv)
        parents.append(b)
        vjps.append(lambda g: -_unbroadcast(g, sb))
    return tape._record("sub", out, parents, vjps)


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    out = av * bv
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        sa = np.shape(av)
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(g * bv, sa))
    if isinstance(b, Var):
        sb = np.shape(bv)
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(g * av, sb))
    return tape._record("mul", out, parents, vjps)


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.divide(av, bv)
    if np.ndim(out) == 0:
        out = float(out)
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        sa = np.shape(av)
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(g / bv, sa))
    if isinstance(b, Var):
        sb = np.shape(bv)
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(-g * out / bv, sb))
    return tape._record("div", out, parents, vjps)


def neg(x):
    return _unary("neg", x, np.negative, lambda x, v: -1.0)


def power(x, p):
    """``x ** p`` for a constant exponent ``p``."""
    if isinstance(p, Var):
        raise TypeError("exponent must be a constant")
    return _unary("pow", x, lambda x: np.power(x, p), lambda x, v: p * np.power(x, p - 1))


# ---------------------------------------------------------------- elementwise

def sin(x):
    return _unary("sin", x, np.sin, lambda x, v: np.cos(x))


def cos(x):
    return _unary("cos", x, np.cos, lambda x, v: -np.sin(x))


def tan(x):
    return _unary("tan", x, np.tan, lambda x, v: 1.0 / np.cos(x) ** 2)


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda x, v: 0.5 / np.sqrt(x + SQRT_EPS))


def exp(x):
    return _unary("exp", x, np.exp, lambda x, v: v)


def log(x):
    return _unary("log", x, np.log, lambda x, v: 1.0 / x)


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda x, v: 1.0 - v * v)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def softplus(x):
    """``log(1 + exp(x))``, computed without overflow."""
    return _unary("softplus", x, _softplus, lambda x, v: _sigmoid(x))


def clamp(x, lo=None, hi=None):
    """Clip to ``[lo, hi]``; gradient 1 inside (boundary included), 0 outside."""
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi

    def fwd(x):
        return np.clip(x, lo_, hi_)

    def deriv(x, v):
        return np.asarray((x >= lo_) & (x <= hi_), dtype=float)

    return _unary("clamp", x, fwd, deriv)


# ---------------------------------------------------------------- structural

def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = np.asarray(value(a)), np.asarray(value(b))
    out = av @ bv
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        if bv.ndim == 1:
            vjps.append(lambda g: np.multiply.outer(g, bv))
        else:
            vjps.append(lambda g: g @ bv.T if av.ndim > 1 else bv @ g)
    if isinstance(b, Var):
        parents.append(b)
        if av.ndim == 1:
            vjps.append(lambda g: np.multiply.outer(av, g))
        else:
            vjps.append(lambda g: av.T @ g if bv.ndim > 1 else av.T @ g)
    return tape._record("matmul", out, parents, vjps)


def vsum(x, axis=None, keepdims=False):
    """Sum over ``axis`` (all axes by default)."""
    if not isinstance(x, Var):
        return np.sum(x, axis=axis, keepdims=keepdims)
    shape = np.shape(x.value)
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return x.tape._record("sum", out, (x,), (vjp,))


def mean(x, axis=None):
    n = np.size(value(x)) if axis is None else np.prod([np.shape(value(x))[a] for a in np.atleast_1d(axis)])
    return vsum(x, axis=axis) / float(n)


def cumsum(x, axis=-1):
    if not isinstance(x, Var):
        return np.cumsum(x, axis=axis)
    out = np.cumsum(x.value, axis=axis)

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)

    return x.tape._record("cumsum", out, (x,), (vjp,))


def getitem(x, idx):
    if not isinstance(x, Var):
        return x[idx]
    shape = np.shape(x.value)
    out = np.asarray(x.value)[idx]

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return z

    return x.tape._record("getitem", out, (x,), (vjp,))


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    old = np.shape(x.value)
    return x.tape._record("reshape", np.reshape(x.value, shape), (x,), (lambda g: np.reshape(g, old),))


def stack(xs, axis=0):
    tape = _tape_of(*xs)
    vals = [np.asarray(value(x), dtype=float) for x in xs]
    out = np.stack(vals, axis=axis)
    if tape is None:
        return out
    parents, vjps = [], []
    for i, x in enumerate(xs):
        if isinstance(x, Var):
            parents.append(x)
            vjps.append(lambda g, i=i: np.take(g, i, axis=axis))
    return tape._record("stack", out, parents, vjps)


def concatenate(xs, axis=0):
    tape = _tape_of(*xs)
    vals = [np.asarray(value(x), dtype=float) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    parents, vjps = [], []
    for i, x in enumerate(xs):
        if isinstance(x, Var):
            parents.append(x)
            sl = (slice(None),) * (axis % out.ndim) + (slice(bounds[i], bounds[i + 1]),)
            vjps.append(lambda g, sl=sl: g[sl])
    return tape._record("concatenate", out, parents, vjps)


# ---------------------------------------------------------------- drivers

def grad(f: Callable, inputs: Sequence) -> list:
    """Reverse-mode gradient of scalar ``f(*inputs)`` w.r.t. every input.

    Raises:
        NonFiniteForward: a NaN or infinity appeared during the forward pass.
    """
    _, g = value_and_grad(f, inputs)
    return g


def value_and_grad(f: Callable, inputs: Sequence):
    tape = Tape()
    xs = [tape.variable(x) for x in inputs]
    out = f(*xs)
    if not isinstance(out, Var):
        # f did not depend on any input
        return out, [0.0 if np.ndim(x) == 0 else np.zeros(np.shape(x)) for x in inputs]
    if np.size(out.value) != 1:
        raise ValueError("grad requires a scalar-valued function")
    out = reshape(out, ()) if np.ndim(out.value) else out
    return float(out.value), tape.gradient(out, xs)


@dataclass
class FDEntry:
    input_index: int
    element: tuple
    analytic: float
    numeric: float
    abs_err: float
    rel_err: float
    passed: bool


@dataclass
class FDReport:
    """Outcome of comparing reverse-mode gradients with central differences."""

    h: float
    tol: float
    atol: float
    entries: list[FDEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def failures(self) -> list[FDEntry]:
        return [e for e in self.entries if not e.passed]


def finite_diff_check(f: Callable, inputs: Sequence, h: float = 1e-6, tol: float = 1e-4, atol: float = 1e-8) -> FDReport:
    """Compare :func:`grad` with central differences element by element.

    An element passes when ``|analytic - numeric| <= max(tol * scale, atol)``
    with ``scale = max(|analytic|, |numeric|)``.
    """
    if not 1e-8 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-8, 1e-3]")
    inputs = [np.asarray(x, dtype=float) for x in inputs]
    analytic = grad(f, [x if x.ndim else float(x) for x in inputs])
    report = FDReport(h=h, tol=tol, atol=atol)
    for i, x in enumerate(inputs):
        ga = np.asarray(analytic[i], dtype=float)
        for idx in np.ndindex(x.shape) if x.ndim else [()]:
            plus = [y.copy() for y in inputs]
            minus = [y.copy() for y in inputs]
            plus[i][idx] += h
            minus[i][idx] -= h
            fp = float(np.asarray(value(f(*[y if y.ndim else float(y) for y in plus]))))
            fm = float(np.asarray(value(f(*[y if y.ndim else float(y) for y in minus]))))
            num = (fp - fm) / (2 * h)
            an = float(ga[idx])
            err = abs(an - num)
            scale = max(abs(an), abs(num))
            rel = err / scale if scale > 0 else 0.0
            report.entries.append(FDEntry(i, idx, an, num, err, rel, err <= max(tol * scale, atol)))
    return report
