"""Reverse-mode automatic differentiation over real vectors.

A :class:`Tape` records vector-valued nodes in evaluation order.  Besides the
usual elementwise and reduction operations it provides two solver nodes:

* :func:`linear_solve_node` -- ``x = A^{-1} b``, backward ``b_bar = A^{-T} x_bar``
  and ``A_bar = -b_bar x^T`` restricted to the sparsity pattern of ``A``;
* :func:`nonlinear_solve_node` -- Newton solve of ``R(u; p) = 0``, backward via
  the adjoint system ``(dR/du)^T z = u_bar`` and ``p_bar = -(dR/dp)^T z``.
"""

from __future__ import annotations

import builtins
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import NewtonError, ShapeError
from .sparse import LuFactorization, SparseMatrix, lu_factorize


class Var:
    """Handle to a node on a tape; the node's value is a 1-D float array."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._nodes[self.index].value

    @property
    def size(self) -> int:
        return self.value.size

    def __len__(self):
        return self.value.size

    def __hash__(self):
        return hash((id(self.tape), self.index))

    def __eq__(self, other):
        return isinstance(other, Var) and other.tape is self.tape and other.index == self.index

    def __repr__(self):
        return f"Var(index={self.index}, size={self.size})"

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
        if isinstance(other, Var):
            raise TypeError("division by a tape variable is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, item):
        if isinstance(item, builtins.slice):
            start, stop, step = item.indices(self.size)
            return take(self, np.arange(start, stop, step))
        return take(self, np.atleast_1d(np.asarray(item, dtype=np.int64)))


@dataclass
class _Node:
    kind: str
    value: np.ndarray
    parents: tuple
    backward: Callable | None
    requires_grad: bool
    is_leaf: bool


class Tape:
    """Append-only computation record.  Single writer; not thread-safe."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self):
        return len(self._nodes)

    def variable(self, value, requires_grad: bool = False) -> Var:
        value = np.array(value, dtype=np.float64, ndmin=1).ravel()
        value.flags.writeable = False
        self._nodes.append(_Node("leaf", value, (), None, bool(requires_grad), True))
        return Var(self, len(self._nodes) - 1)

    def constant(self, value) -> Var:
        return self.variable(value, requires_grad=False)

    def kinds(self) -> list[str]:
        return [n.kind for n in self._nodes]

    def _push(self, kind, value, parents: Sequence[Var], backward) -> Var:
        value = np.asarray(value, dtype=np.float64).ravel()
        value.flags.writeable = False
        idx = tuple(p.index for p in parents)
        rg = any(self._nodes[i].requires_grad for i in idx)
        self._nodes.append(_Node(kind, value, idx, backward if rg else None, rg, False))
        return Var(self, len(self._nodes) - 1)

    def backward(self, loss: Var) -> "Gradients":
        if loss.tape is not self:
            raise ValueError("loss variable belongs to a different tape")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got size {loss.size}")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[loss.index] = np.ones(1)
        for i in range(loss.index, -1, -1):
            node = self._nodes[i]
            g = grads[i]
            if g is None or node.backward is None:
                continue
            parent_grads = node.backward(g)
            for pi, pg in zip(node.parents, parent_grads):
                if pg is None or not self._nodes[pi].requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                grads[pi] = pg.copy() if grads[pi] is None else grads[pi] + pg
        out = {}
        for i, node in enumerate(self._nodes):
            if node.is_leaf and node.requires_grad:
                g = grads[i] if grads[i] is not None else np.zeros_like(node.value)
                g = np.array(g, dtype=np.float64)
                g.flags.writeable = False
                out[i] = g
        return Gradients(self, out)


class Gradients(Mapping):
    """Read-only map from leaf :class:`Var` to accumulated gradient."""

    def __init__(self, tape: Tape, by_index: dict[int, np.ndarray]):
        self._tape = tape
        self._g = by_index

    def __getitem__(self, var: Var) -> np.ndarray:
        if var.tape is not self._tape:
            raise KeyError("variable belongs to a different tape")
        return self._g[var.index]

    def __iter__(self):
        return (Var(self._tape, i) for i in self._g)

    def __len__(self):
        return len(self._g)


def variable(tape: Tape, value, requires_grad: bool = False) -> Var:
    return tape.variable(value, requires_grad)


def backward(tape: Tape, loss: Var) -> Gradients:
    return tape.backward(loss)


# elementwise and reduction ops ----------------------------------------------


def _tape_of(*xs) -> Tape:
    tapes = {id(x.tape): x.tape for x in xs if isinstance(x, Var)}
    if not tapes:
        raise TypeError("at least one operand must be a tape variable")
    if len(tapes) > 1:
        raise ValueError("operands belong to different tapes")
    return next(iter(tapes.values()))


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    return tape.constant(x)


def _broadcast_size(a: Var, b: Var) -> int:
    na, nb = a.size, b.size
    if na != nb and na != 1 and nb != 1:
        raise ShapeError(f"incompatible sizes {na} and {nb}")
    return max(na, nb)


def _unbroadcast(g, n):
    return np.array([g.sum()]) if n == 1 and g.size != 1 else g


def _binary(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_size(a, b)
    return tape, a, b


def add(a, b) -> Var:
    tape, a, b = _binary(a, b)
    na, nb = a.size, b.size
    return tape._push("add", a.value + b.value, (a, b),
                      lambda g: (_unbroadcast(g, na), _unbroadcast(g, nb)))


def sub(a, b) -> Var:
    tape, a, b = _binary(a, b)
    na, nb = a.size, b.size
    return tape._push("sub", a.value - b.value, (a, b),
                      lambda g: (_unbroadcast(g, na), -_unbroadcast(g, nb)))


def mul(a, b) -> Var:
    """Elementwise product; a length-1 operand broadcasts."""
    tape, a, b = _binary(a, b)
    va, vb = a.value, b.value
    return tape._push("mul", va * vb, (a, b),
                      lambda g: (_unbroadcast(g * vb, va.size), _unbroadcast(g * va, vb.size)))


def scale(a: Var, alpha: float) -> Var:
    alpha = float(alpha)
    return a.tape._push("scale", alpha * a.value, (a,), lambda g: (alpha * g,))


def square(a: Var) -> Var:
    v = a.value
    return a.tape._push("square", v * v, (a,), lambda g: (2.0 * v * g,))


def dot(a, b) -> Var:
    tape, a, b = _binary(a, b)
    if a.size != b.size:
        raise ShapeError(f"dot of sizes {a.size} and {b.size}")
    va, vb = a.value, b.value
    return tape._push("dot", [va @ vb], (a, b), lambda g: (g[0] * vb, g[0] * va))


def norm2(a: Var) -> Var:
    """Euclidean norm; the gradient at the zero vector is taken as zero."""
    v = a.value
    n = float(np.sqrt(v @ v))

    def bw(g):
        if n == 0.0:
            return (np.zeros_like(v),)
        return (g[0] * v / n,)

    return a.tape._push("norm2", [n], (a,), bw)


def sum(a: Var) -> Var:  # noqa: A001 - mirrors the numpy name
    n = a.size
    return a.tape._push("sum", [a.value.sum()], (a,), lambda g: (np.full(n, g[0]),))


def mean(a: Var) -> Var:
    n = a.size
    return a.tape._push("mean", [a.value.mean()], (a,), lambda g: (np.full(n, g[0] / n),))


def abs(a: Var) -> Var:  # noqa: A001
    v = a.value
    return a.tape._push("abs", np.abs(v), (a,), lambda g: (np.sign(v) * g,))


def maximum(a: Var, floor: float) -> Var:
    """Elementwise ``max(a, floor)``; no gradient flows through clamped entries."""
    v = a.value
    active = v >= floor
    return a.tape._push("maximum", np.where(active, v, floor), (a,), lambda g: (g * active,))


def sigmoid(a: Var) -> Var:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return a.tape._push("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def concat(parts: Sequence) -> Var:
    tape = _tape_of(*parts)
    vs = [_lift(tape, p) for p in parts]
    bounds = np.cumsum([0] + [v.size for v in vs])

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(vs)))

    return tape._push("concat", np.concatenate([v.value for v in vs]), vs, bw)


def take(a: Var, idx) -> Var:
    """Gather ``a[idx]``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(idx, dtype=np.int64)
    n = a.size
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"index out of range for size {n}")

    def bw(g):
        out = np.zeros(n)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape._push("take", a.value[idx], (a,), bw)


def slice(a: Var, start: int, stop: int) -> Var:  # noqa: A001
    if not (0 <= start <= stop <= a.size):
        raise ShapeError(f"slice [{start}:{stop}] out of range for size {a.size}")
    return take(a, np.arange(start, stop))


def scatter(a: Var, idx, size: int) -> Var:
    """Embed ``a`` into a zero vector of length ``size`` at positions ``idx``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (a.size,):
        raise ShapeError("scatter needs one index per entry")
    out = np.zeros(size)
    out[idx] = a.value
    return a.tape._push("scatter", out, (a,), lambda g: (g[idx],))


def matvec(m, x: Var) -> Var:
    """Product of a constant matrix (dense array or :class:`SparseMatrix`) with ``x``."""
    if isinstance(m, SparseMatrix):
        return x.tape._push("matvec", m.matvec(x.value), (x,), lambda g: (m.rmatvec(g),))
    m = np.asarray(m, dtype=np.float64)
    if m.shape[1] != x.size:
        raise ShapeError(f"matrix {m.shape} times vector of size {x.size}")
    return x.tape._push("matvec", m @ x.value, (x,), lambda g: (m.T @ g,))


def affine(x: Var, w: Var, b: Var, n_in: int, n_out: int) -> Var:
    """Batched dense layer ``Y = X W^T + b``.

    ``x`` holds a row-major ``(batch, n_in)`` block, ``w`` a row-major
    ``(n_out, n_in)`` matrix; the result is row-major ``(batch, n_out)``.
    """
    tape = _tape_of(x, w, b)
    if x.size % n_in or w.size != n_in * n_out or b.size != n_out:
        raise ShapeError("affine operand sizes do not match the layer shape")
    X = x.value.reshape(-1, n_in)
    W = w.value.reshape(n_out, n_in)
    # accumulate column by column so each output row depends only on its own
    # input row; a BLAS product may round differently depending on batch position
    Y = np.broadcast_to(b.value, (X.shape[0], n_out)).copy()
    for j in range(n_in):
        Y += X[:, j:j + 1] * W[:, j]

    def bw(g):
        G = g.reshape(-1, n_out)
        return ((G @ W).ravel(), (G.T @ X).ravel(), G.sum(axis=0))

    return tape._push("affine", Y.ravel(), (x, w, b), bw)


# solver nodes ---------------------------------------------------------------


class ParamDependentMatrix:
    """Sparse matrix with a fixed pattern whose values depend on a tape variable.

    ``evaluate(p)`` returns the nonzero values (aligned with ``pattern.data``)
    and their sensitivity, an ``nnz x len(p)`` :class:`SparseMatrix`.
    """

    def __init__(self, pattern: SparseMatrix, param: Var,
                 evaluate: Callable[[np.ndarray], tuple[np.ndarray, SparseMatrix]]):
        self.pattern = pattern
        self.param = param
        self.evaluate = evaluate

    @classmethod
    def affine(cls, pattern: SparseMatrix, param: Var, sensitivity: SparseMatrix,
               offset=None) -> "ParamDependentMatrix":
        """Values ``offset + sensitivity @ p``."""
        if sensitivity.shape != (pattern.nnz, param.size):
            raise ShapeError(
                f"sensitivity must be {(pattern.nnz, param.size)}, got {sensitivity.shape}")
        base = np.zeros(pattern.nnz) if offset is None else np.asarray(offset, dtype=np.float64)

        def evaluate(p):
            return base + sensitivity.matvec(p), sensitivity

        return cls(pattern, param, evaluate)

    @classmethod
    def from_values(cls, pattern: SparseMatrix, values: Var) -> "ParamDependentMatrix":
        """Treat the stored entries themselves as the parameters."""
        return cls.affine(pattern, values, SparseMatrix.identity(pattern.nnz))

    def matrix(self, p=None) -> SparseMatrix:
        vals, _ = self.evaluate(self.param.value if p is None else np.asarray(p, dtype=np.float64))
        return self.pattern.with_data(vals)


def linear_solve_node(tape: Tape, a, b, factorization: LuFactorization | None = None) -> Var:
    """Record ``x = solve(A, b)``.

    ``a`` is a constant :class:`SparseMatrix` or a :class:`ParamDependentMatrix`.
    A precomputed ``factorization`` of a constant ``a`` may be shared between
    several nodes.  The forward factorization is reused for the transpose solve.
    """
    b = _lift(tape, b)
    if isinstance(a, ParamDependentMatrix):
        if a.param.tape is not tape:
            raise ValueError("matrix parameter belongs to a different tape")
        vals, sens = a.evaluate(a.param.value)
        mat = a.pattern.with_data(vals)
        fact = lu_factorize(mat)
        x = fact.solve(b.value)
        rows, cols = mat.row_indices(), mat.indices

        def bw(g):
            gb = fact.solve_transpose(g)
            ga = -gb[rows] * x[cols]
            return gb, sens.rmatvec(ga)

        return tape._push("linear_solve", x, (b, a.param), bw)

    if not isinstance(a, SparseMatrix):
        raise TypeError("a must be a SparseMatrix or ParamDependentMatrix")
    if a.shape[0] != b.size:
        raise ShapeError(f"system of size {a.shape} with right-hand side of size {b.size}")
    fact = factorization if factorization is not None else lu_factorize(a)
    x = fact.solve(b.value)
    return tape._push("linear_solve", x, (b,), lambda g: (fact.solve_transpose(g),))


class ResidualSystem(Protocol):
    """Callbacks describing ``R(u; p) = 0`` for the Newton node."""

    def residual(self, u: np.ndarray, p: np.ndarray) -> np.ndarray: ...

    def jacobian(self, u: np.ndarray, p: np.ndarray) -> SparseMatrix: ...

    def vjp_param(self, u: np.ndarray, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Return ``v^T dR/dp``."""
        ...


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-10
    max_iter: int = 30
    divergence_window: int = 5


def newton_solve(sys: ResidualSystem, p: np.ndarray, u_init, cfg: NewtonConfig = NewtonConfig()):
    """Plain Newton iteration; returns ``(u, residual_trace)``."""
    u = np.array(u_init, dtype=np.float64)
    trace: list[float] = []
    growth = 0
    for it in range(cfg.max_iter + 1):
        r = sys.residual(u, p)
        nr = float(np.linalg.norm(r))
        trace.append(nr)
        if not np.isfinite(nr):
            raise NewtonError("non-finite residual", trace)
        if nr <= cfg.tol:
            return u, trace
        if it == cfg.max_iter:
            raise NewtonError(f"no convergence in {cfg.max_iter} iterations", trace)
        growth = growth + 1 if len(trace) > 1 and nr > trace[-2] else 0
        if growth >= cfg.divergence_window:
            raise NewtonError("residual grew for consecutive iterations", trace)
        u = u - lu_factorize(sys.jacobian(u, p)).solve(r)
    raise AssertionError("unreachable")


def nonlinear_solve_node(tape: Tape, sys: ResidualSystem, p: Var, u_init,
                         newton: NewtonConfig = NewtonConfig()) -> Var:
    """Record the Newton solution ``u`` of ``R(u; p) = 0``."""
    pv = p.value
    u, _ = newton_solve(sys, pv, u_init, newton)

    def bw(g):
        z = lu_factorize(sys.jacobian(u, pv)).solve_transpose(g)
        return (-np.asarray(sys.vjp_param(u, pv, z)),)

    return tape._push("nonlinear_solve", u, (p,), bw)


# verification ---------------------------------------------------------------


def gradient_check(f: Callable[[Tape, Var], Var], x0, eps: float = 1e-6) -> float:
    """Largest relative deviation between tape and central-difference gradients.

    The metric per entry is ``|g - g_fd| / max(1, |g|, |g_fd|)``.
    """
    x0 = np.array(x0, dtype=np.float64, ndmin=1)
    tape = Tape()
    x = tape.variable(x0, requires_grad=True)
    g = tape.backward(f(tape, x))[x]

    def value(xv):
        t = Tape()
        return float(f(t, t.variable(xv)).value[0])

    fd = np.empty_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = eps
        fd[i] = (value(x0 + e) - value(x0 - e)) / (2 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(g), np.abs(fd)))
    return float(np.max(np.abs(g - fd) / denom))
