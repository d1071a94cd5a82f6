"""Finite differences on (0, 1): 1D Poisson and the 1+1D heat equation.

The heat equation is available both as one monolithic space-time system and as
a backward Euler chain recorded on a tape.  Both use the same unknown layout,
time-major: block ``j`` (``j = 1..n_k``) holds the interior nodal values at
``t_j``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .sparse import SparseMatrix, kron, lu_factorize, shift_matrix


@dataclass(frozen=True)
class Grid1D:
    n_h: int

    def __post_init__(self):
        if self.n_h < 2:
            raise ValueError("Grid1D needs n_h >= 2")

    @property
    def h(self) -> float:
        return 1.0 / self.n_h

    @property
    def n_interior(self) -> int:
        return self.n_h - 1

    @property
    def x(self) -> np.ndarray:
        """Interior node coordinates ``i*h`` for ``1 <= i <= n_h - 1``."""
        return np.arange(1, self.n_h) / self.n_h


@dataclass(frozen=True)
class TimeGrid:
    n_k: int
    T: float = 1.0

    def __post_init__(self):
        if self.n_k < 1 or not self.T > 0:
            raise ValueError("TimeGrid needs n_k >= 1 and T > 0")

    @property
    def k(self) -> float:
        return self.T / self.n_k

    @property
    def t(self) -> np.ndarray:
        """Time levels ``t_1..t_{n_k}``."""
        return np.arange(1, self.n_k + 1) * self.k


def poisson1d_stiffness(g: Grid1D) -> SparseMatrix:
    """Second-difference matrix ``(1/h^2) tridiag(-1, 2, -1)`` on the interior nodes."""
    n = g.n_interior
    inv_h2 = float(g.n_h) ** 2
    i = np.arange(n)
    rows = np.r_[i, i[1:], i[:-1]]
    cols = np.r_[i, i[1:] - 1, i[:-1] + 1]
    vals = np.r_[np.full(n, 2.0 * inv_h2), np.full(2 * (n - 1), -inv_h2)]
    return SparseMatrix.from_coo((n, n), rows, cols, vals)


def poisson1d_solution(g: Grid1D, f_rhs) -> np.ndarray:
    """Interior values solving ``K_h U = F`` with ``F`` a scalar or a nodal vector."""
    f = np.broadcast_to(np.asarray(f_rhs, dtype=np.float64), (g.n_interior,))
    return lu_factorize(poisson1d_stiffness(g)).solve(np.array(f))


def time_step_matrix(g: Grid1D, t: TimeGrid) -> SparseMatrix:
    """``(1/k) I_h + K_h``, the backward Euler system matrix."""
    return SparseMatrix.identity(g.n_interior) * (1.0 / t.k) + poisson1d_stiffness(g)


def heat_spacetime_matrix(g: Grid1D, t: TimeGrid) -> SparseMatrix:
    """``I_k (x) ((1/k) I_h + K_h) - (1/k) S_k (x) I_h``."""
    i_h = SparseMatrix.identity(g.n_interior)
    diag = kron(SparseMatrix.identity(t.n_k), time_step_matrix(g, t))
    return diag - kron(shift_matrix(t.n_k), i_h) * (1.0 / t.k)


def heat_spacetime_rhs(g: Grid1D, t: TimeGrid, force, u0):
    """Space-time load: block ``j`` is ``f_j``; block 1 also carries ``u0 / k``.

    Accepts arrays (returns an array) or tape variables (returns a variable).
    """
    m = g.n_interior
    if isinstance(force, ad.Var) or isinstance(u0, ad.Var):
        tape = force.tape if isinstance(force, ad.Var) else u0.tape
        force = ad._lift(tape, force)
        u0 = ad._lift(tape, u0)
        first = force[:m] + ad.scale(u0, 1.0 / t.k)
        if t.n_k == 1:
            return first
        return ad.concat([first, force[m:]])
    rhs = np.array(force, dtype=np.float64).reshape(t.n_k * m)
    rhs[:m] += np.asarray(u0, dtype=np.float64) / t.k
    return rhs


def backward_euler_chain(tape: ad.Tape, g: Grid1D, t: TimeGrid, forces, u0) -> list[ad.Var]:
    """Record ``[(1/k) I + K_h] U^j = F^j + (1/k) U^{j-1}`` for ``j = 1..n_k``.

    ``forces`` is ``None`` (no source), a sequence of ``n_k`` per-step loads
    (arrays or variables), or a space-time vector in the time-major layout.
    All steps share one factorization.  Returns ``[U^1, ..., U^{n_k}]``.
    """
    m = g.n_interior
    mat = time_step_matrix(g, t)
    fact = lu_factorize(mat)
    u_prev = ad._lift(tape, u0)
    if forces is None:
        per_step = [None] * t.n_k
    elif isinstance(forces, ad.Var):
        per_step = [forces[j * m:(j + 1) * m] for j in range(t.n_k)]
    elif isinstance(forces, np.ndarray) and forces.ndim == 1 and forces.size == t.n_k * m:
        per_step = [forces[j * m:(j + 1) * m] for j in range(t.n_k)]
    else:
        per_step = list(forces)
        if len(per_step) != t.n_k:
            raise ValueError(f"expected {t.n_k} per-step forces, got {len(per_step)}")
    states = []
    for f in per_step:
        rhs = ad.scale(u_prev, 1.0 / t.k)
        if f is not None:
            rhs = rhs + f
        u_prev = ad.linear_solve_node(tape, mat, rhs, factorization=fact)
        states.append(u_prev)
    return states
