"""Reverse-mode differentiation over dense float64 arrays.

Every primitive in this module accepts plain ``numpy`` arrays or :class:`Var`
handles. With plain arrays the primitive just evaluates; as soon as one input
is a ``Var`` the call is recorded on that variable's :class:`Tape` so it can be
differentiated with :meth:`Tape.backward` or re-evaluated with
:meth:`Tape.replay`. Higher-level code is therefore written once and runs
either untaped (fast evaluation) or taped (training, gradient checks).

Arrays may carry leading batch axes; matrix primitives act on the last two.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    InvalidInputError,
    NumericInstabilityError,
    SingularMatrixError,
)

COND_LIMIT = 1e12


class _Node:
    __slots__ = ("op", "inputs", "value", "fwd", "vjp", "needs_grad")

    def __init__(self, op, inputs, value, fwd, vjp, needs_grad):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.fwd = fwd
        self.vjp = vjp
        self.needs_grad = needs_grad


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # ndarray <op> Var defers to the Var reflected op

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        node = self.tape.nodes[self.index]
        return f"Var(op={node.op!r}, shape={self.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Tape:
    """Record of primitive operations plus the named parameter leaves."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, int] = {}

    def _leaf(self, op, value, needs_grad):
        self.nodes.append(_Node(op, (), value, None, None, needs_grad))
        return Var(self, len(self.nodes) - 1)

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise InvalidInputError(f"parameter '{name}' registered twice")
        arr = as_float(value).copy()
        var = self._leaf("param", arr, True)
        self.params[name] = var.index
        return var

    def constant(self, value) -> Var:
        return self._leaf("const", as_float(value), False)

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise InvalidInputError("Var belongs to a different tape")
            return x
        return self.constant(x)

    def record(self, op, fwd, vjp, inputs):
        vals = [self.nodes[v.index].value for v in inputs]
        out = fwd(*vals)
        needs = any(self.nodes[v.index].needs_grad for v in inputs)
        self.nodes.append(
            _Node(op, tuple(v.index for v in inputs), out, fwd, vjp, needs)
        )
        return Var(self, len(self.nodes) - 1)

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every registered parameter.

        Parameters that do not influence ``loss`` get zero arrays.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise InvalidInputError("loss must be a Var recorded on this tape")
        if loss.value.size != 1:
            raise InvalidInputError(
                f"loss must be scalar, got shape {loss.value.shape}"
            )
        grads: list = [None] * (loss.index + 1)
        grads[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or not node.inputs:
                continue
            vals = [self.nodes[j].value for j in node.inputs]
            parts = node.vjp(g, node.value, *vals)
            for j, gj in zip(node.inputs, parts):
                if gj is None or not self.nodes[j].needs_grad:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        out = {}
        for name, idx in self.params.items():
            g = grads[idx] if idx < len(grads) else None
            shape = self.nodes[idx].value.shape
            out[name] = np.zeros(shape) if g is None else np.asarray(g).reshape(shape)
        return out

    def replay(self, overrides: dict[str, np.ndarray] | None = None):
        """Re-run every recorded primitive; returns the list of node values.

        ``overrides`` replaces parameter leaves by name. The stored values
        are left untouched.
        """
        overrides = overrides or {}
        unknown = set(overrides) - set(self.params)
        if unknown:
            raise InvalidInputError(f"unknown parameters: {sorted(unknown)}")
        by_index = {self.params[k]: np.asarray(v, dtype=np.float64) for k, v in overrides.items()}
        values = []
        for i, node in enumerate(self.nodes):
            if not node.inputs:
                values.append(by_index.get(i, node.value))
            else:
                values.append(node.fwd(*[values[j] for j in node.inputs]))
        return values


def as_float(x) -> np.ndarray:
    """float64 array, except that extended-precision input stays extended."""
    arr = np.asarray(x)
    if arr.dtype == np.longdouble:
        return arr
    return arr.astype(np.float64, copy=False)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _apply(op, fwd, vjp, *args):
    tape = _tape_of(args)
    if tape is None:
        return fwd(*[as_float(a) for a in args])
    return tape.record(op, fwd, vjp, [tape.lift(a) for a in args])


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(a):
    return np.swapaxes(a, -1, -2)


# elementwise arithmetic --------------------------------------------------

def add(a, b):
    return _apply(
        "add", np.add,
        lambda g, o, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        a, b,
    )


def sub(a, b):
    return _apply(
        "sub", np.subtract,
        lambda g, o, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
        a, b,
    )


def mul(a, b):
    return _apply(
        "mul", np.multiply,
        lambda g, o, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        a, b,
    )


def div(a, b):
    return _apply(
        "div", np.divide,
        lambda g, o, x, y: (
            _unbroadcast(g / y, x.shape),
            _unbroadcast(-g * o / y, y.shape),
        ),
        a, b,
    )


def neg(a):
    return _apply("neg", np.negative, lambda g, o, x: (-g,), a)


def square(a):
    return _apply("square", np.square, lambda g, o, x: (2.0 * x * g,), a)


def power(a, p: float):
    p = float(p)
    return _apply(
        "power",
        lambda x: np.power(x, p),
        lambda g, o, x: (g * p * np.power(x, p - 1.0),),
        a,
    )


def exp(a):
    return _apply("exp", np.exp, lambda g, o, x: (g * o,), a)


def log(a):
    return _apply("log", np.log, lambda g, o, x: (g / x,), a)


def _sqrt_vjp(g, o, x):
    # subgradient 0 at the origin keeps coincident points differentiable
    safe = np.where(o > 0, o, 1.0)
    return (np.where(o > 0, g / (2.0 * safe), 0.0),)


def sqrt(a):
    return _apply("sqrt", np.sqrt, _sqrt_vjp, a)


def abs_(a):
    return _apply("abs", np.abs, lambda g, o, x: (g * np.sign(x),), a)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def sigmoid(a):
    return _apply("sigmoid", _sigmoid, lambda g, o, x: (g * o * (1.0 - o),), a)


def softplus(a):
    return _apply(
        "softplus",
        lambda x: np.logaddexp(0.0, x),
        lambda g, o, x: (g * _sigmoid(x),),
        a,
    )


def clip_min(a, lo: float):
    lo = float(lo)
    return _apply(
        "clip_min",
        lambda x: np.maximum(x, lo),
        lambda g, o, x: (np.where(x > lo, g, 0.0),),
        a,
    )


# structure ---------------------------------------------------------------

def matmul(a, b):
    def vjp(g, o, x, y):
        return (
            _unbroadcast(g @ _swap(y), x.shape),
            _unbroadcast(_swap(x) @ g, y.shape),
        )

    av, bv = value_of(a), value_of(b)
    if np.ndim(av) < 2 or np.ndim(bv) < 2:
        raise InvalidInputError("matmul operands must be at least 2-D")
    if np.shape(av)[-1] != np.shape(bv)[-2]:
        raise InvalidInputError(
            f"matmul shape mismatch {np.shape(av)} @ {np.shape(bv)}"
        )
    return _apply("matmul", np.matmul, vjp, a, b)


def transpose(a):
    return _apply("transpose", _swap, lambda g, o, x: (_swap(g),), a)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims=False):
    def vjp(g, o, x):
        if not keepdims:
            for ax in _norm_axes(axis, x.ndim):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _apply("sum", lambda x: np.sum(x, axis=axis, keepdims=keepdims), vjp, a)


def mean(a, axis=None, keepdims=False):
    shape = np.shape(value_of(a))
    count = int(np.prod([shape[ax] for ax in _norm_axes(axis, len(shape))]))
    return div(sum_(a, axis, keepdims), float(count))


def reshape(a, shape):
    return _apply(
        "reshape",
        lambda x: np.reshape(x, shape),
        lambda g, o, x: (np.reshape(g, x.shape),),
        a,
    )


def broadcast_to(a, shape):
    shape = tuple(shape)
    return _apply(
        "broadcast_to",
        lambda x: np.broadcast_to(x, shape).copy(),
        lambda g, o, x: (_unbroadcast(g, x.shape),),
        a,
    )


def index(a, idx):
    def vjp(g, o, x):
        out = np.zeros_like(x)
        np.add.at(out, idx, g)
        return (out,)

    return _apply("index", lambda x: x[idx], vjp, a)


def concat(parts, axis=0):
    parts = list(parts)

    def fwd(*xs):
        return np.concatenate(xs, axis=axis)

    def vjp(g, o, *xs):
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, cuts, axis=axis))

    return _apply("concat", fwd, vjp, *parts)


# reductions with custom rules --------------------------------------------

def log_softmax(a, axis=-1):
    def fwd(x):
        m = np.max(x, axis=axis, keepdims=True)
        z = x - m
        return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))

    def vjp(g, o, x):
        return (g - np.exp(o) * np.sum(g, axis=axis, keepdims=True),)

    return _apply("log_softmax", fwd, vjp, a)


def offdiag_std(a, floor: float = 1e-12):
    """Population std of the off-diagonal entries of each trailing n x n block.

    Blocks whose std falls below ``floor`` report 1.0 (zero gradient).
    """
    shape = np.shape(value_of(a))
    if len(shape) < 2 or shape[-1] != shape[-2] or shape[-1] < 2:
        raise InvalidInputError(f"need square blocks with n >= 2, got {shape}")
    n = shape[-1]
    mask = ~np.eye(n, dtype=bool)
    m = n * (n - 1)

    def _dev(x):
        mu = np.sum(np.where(mask, x, 0.0), axis=(-2, -1), keepdims=True) / m
        return np.where(mask, x - mu, 0.0)

    def fwd(x):
        std = np.sqrt(np.sum(_dev(x) ** 2, axis=(-2, -1)) / m)
        return np.where(std < floor, 1.0, std)

    def vjp(g, o, x):
        std = np.sqrt(np.sum(_dev(x) ** 2, axis=(-2, -1)) / m)
        live = std >= floor
        scale = np.where(live, g / (m * np.where(live, std, 1.0)), 0.0)
        return (_dev(x) * scale[..., None, None],)

    return _apply("offdiag_std", fwd, vjp, a)


# linear algebra ----------------------------------------------------------

def lu_factor(M):
    """LU with partial pivoting, batched over leading axes.

    Returns ``(LU, perm, pivots)`` with ``M[perm] = L @ U`` per batch entry,
    unit-diagonal ``L`` stored below the diagonal of ``LU``.
    """
    M = as_float(M)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise InvalidInputError(f"linear_solve needs a square matrix, got {M.shape}")
    n = M.shape[-1]
    batch = M.shape[:-2]
    lu = M.reshape((-1, n, n)).copy()
    B = lu.shape[0]
    rows = np.arange(B)
    perm = np.tile(np.arange(n), (B, 1))
    pivots = np.empty((B, n), dtype=lu.dtype)
    for k in range(n):
        p = k + np.argmax(np.abs(lu[:, k:, k]), axis=1)
        swap = p != k
        if swap.any():
            r, pk = rows[swap], p[swap]
            tmp = lu[r, k].copy()
            lu[r, k] = lu[r, pk]
            lu[r, pk] = tmp
            tmp = perm[r, k].copy()
            perm[r, k] = perm[r, pk]
            perm[r, pk] = tmp
        piv = lu[:, k, k]
        pivots[:, k] = piv
        if np.any(piv == 0.0):
            raise SingularMatrixError("zero pivot in LU factorization", 0.0)
        lu[:, k + 1:, k] /= piv[:, None]
        lu[:, k + 1:, k + 1:] -= lu[:, k + 1:, k, None] * lu[:, k, None, k + 1:]
    return (
        lu.reshape(batch + (n, n)),
        perm.reshape(batch + (n,)),
        pivots.reshape(batch + (n,)),
    )


def condition_estimate(pivots) -> np.ndarray:
    mags = np.abs(pivots)
    return mags.max(axis=-1) / mags.min(axis=-1)


def linear_solve(M, B) -> np.ndarray:
    """Solve ``M X = B`` for X; batched over leading axes of either argument."""
    M = as_float(M)
    B = as_float(B)
    if B.ndim < 2:
        raise InvalidInputError(f"right-hand side must be 2-D, got {B.shape}")
    if M.ndim < 2 or M.shape[-1] != M.shape[-2] or M.shape[-1] != B.shape[-2]:
        raise InvalidInputError(f"shape mismatch: M {M.shape}, B {B.shape}")
    lu, perm, pivots = lu_factor(M)
    mags = np.abs(pivots)
    if np.any(condition_estimate(pivots) >= COND_LIMIT):
        raise SingularMatrixError(
            "matrix is singular or ill-conditioned", float(mags.min())
        )
    n = M.shape[-1]
    batch = np.broadcast_shapes(M.shape[:-2], B.shape[:-2])
    lu = np.broadcast_to(lu, batch + (n, n))
    perm = np.broadcast_to(perm, batch + (n,))
    rhs = np.broadcast_to(B, batch + B.shape[-2:])
    x = np.take_along_axis(rhs, perm[..., :, None], axis=-2).astype(
        np.result_type(lu, rhs))
    for i in range(1, n):
        x[..., i, :] -= np.einsum("...k,...km->...m", lu[..., i, :i], x[..., :i, :])
    for i in range(n - 1, -1, -1):
        x[..., i, :] -= np.einsum("...k,...km->...m", lu[..., i, i + 1:], x[..., i + 1:, :])
        x[..., i, :] /= lu[..., i, i, None]
    if not np.all(np.isfinite(x)):
        raise NumericInstabilityError("non-finite entries in linear_solve output")
    return x


def solve(M, B):
    """Differentiable ``M^{-1} B`` using the implicit-function rule."""

    def vjp(g, o, m, b):
        gb = linear_solve(_swap(m), g)
        gm = -gb @ _swap(o)
        return _unbroadcast(gm, m.shape), _unbroadcast(gb, b.shape)

    return _apply("solve", linear_solve, vjp, M, B)


# geometry ----------------------------------------------------------------

def pairwise_sq_distances(Z):
    """Squared Euclidean distances between the rows of ``Z`` (batched)."""
    shape = np.shape(value_of(Z))
    if len(shape) < 2 or shape[-1] < 1 or shape[-2] < 1:
        raise InvalidInputError(f"need a non-empty n x c matrix, got {shape}")
    n, c = shape[-2:]
    lead = shape[:-2]
    diff = reshape(Z, lead + (n, 1, c)) - reshape(Z, lead + (1, n, c))
    return sum_(square(diff), axis=-1)


# gradient checking -------------------------------------------------------

def finite_diff_check(forward, params: dict, step: float = 1e-5,
                      precision=np.longdouble) -> float:
    """Max relative error between tape gradients and central differences.

    ``forward(tape, vars)`` must build a scalar loss from the dict of
    parameter ``Var`` s registered on ``tape``. The error for each entry is
    ``|analytic - numeric| / max(1e-8, |numeric|)``.

    Analytic gradients are taken in float64. The perturbed evaluations run
    in ``precision`` (extended by default) so that round-off in the loss
    difference stays well below the 1e-8 floor of the denominator.
    """
    if step <= 0:
        raise InvalidInputError("step must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def run(values):
        tape = Tape()
        vars_ = {k: tape.param(k, v) for k, v in values.items()}
        return tape, forward(tape, vars_)

    tape, loss = run(params)
    analytic = tape.backward(loss)

    wide = {k: v.astype(precision) for k, v in params.items()}
    h = np.asarray(step, dtype=precision)
    worst = 0.0
    for name, base in wide.items():
        for pos in np.ndindex(base.shape):
            vals = []
            for sign in (1, -1):
                arr = base.copy()
                arr[pos] += sign * h
                v = np.asarray(value_of(run({**wide, name: arr})[1])).reshape(())
                if not np.isfinite(v):
                    raise NumericInstabilityError(
                        f"non-finite loss perturbing {name}{list(pos)}"
                    )
                vals.append(v)
            numeric = float((vals[0] - vals[1]) / (2 * h))
            err = abs(analytic[name][pos] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst
