"""Bilinear finite elements on structured rectilinear meshes.

Covers the three 2D problems used by the experiments: the thermal fin
(subdomain conductivities plus a Robin boundary), Poisson with a nodal
diffusion coefficient, and one Crank-Nicolson step of ``u_t - Lap u + u^2 = f``.
Homogeneous Dirichlet conditions are imposed by eliminating the boundary
nodes from the unknowns.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import autodiff as ad
from .errors import CoefficientDomainError
from .sparse import SparseMatrix

NONE, NEUMANN, ROBIN, DIRICHLET = 0, 1, 2, 3
TAG_NAMES = {NONE: "none", NEUMANN: "neumann", ROBIN: "robin", DIRICHLET: "dirichlet"}


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray   # reference coordinates in [0, 1]^d
    weights: np.ndarray  # sum to 1 (the reference measure)


def gauss2x2() -> QuadratureRule:
    g = 0.5 / np.sqrt(3.0)
    s = np.array([0.5 - g, 0.5 + g])
    pts = np.array([(a, b) for b in s for a in s])
    return QuadratureRule(pts, np.full(4, 0.25))


def gauss2() -> QuadratureRule:
    g = 0.5 / np.sqrt(3.0)
    return QuadratureRule(np.array([0.5 - g, 0.5 + g]), np.array([0.5, 0.5]))


CELL_RULE = gauss2x2()
EDGE_RULE = gauss2()


def _q1_tables(rule: QuadratureRule):
    """Shape values and reference derivatives at the quadrature points.

    Local node order is counterclockwise from the lower-left corner.
    """
    s, t = rule.points[:, 0], rule.points[:, 1]
    N = np.stack([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t], axis=1)
    dNds = np.stack([-(1 - t), (1 - t), t, -t], axis=1)
    dNdt = np.stack([-(1 - s), -s, s, 1 - s], axis=1)
    return N, dNds, dNdt


_N, _DNDS, _DNDT = _q1_tables(CELL_RULE)


class RectMesh:
    """Active cells of a tensor grid, with subdomain ids and boundary edge tags.

    Nodes are numbered row by row (``y`` outer, ``x`` inner) over the nodes
    touched by at least one active cell.
    """

    def __init__(self, xs, ys, active, subdomain, edge_tag):
        self.xs = np.asarray(xs, dtype=np.float64)
        self.ys = np.asarray(ys, dtype=np.float64)
        if np.any(np.diff(self.xs) <= 0) or np.any(np.diff(self.ys) <= 0):
            raise ValueError("grid lines must be strictly increasing")
        active = np.asarray(active, dtype=bool)
        ncx, ncy = self.xs.size - 1, self.ys.size - 1
        if active.shape != (ncx, ncy):
            raise ValueError("active mask must have shape (n_cells_x, n_cells_y)")

        used = np.zeros((ncx + 1, ncy + 1), dtype=bool)
        ci, cj = np.nonzero(active)
        for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
            used[ci + di, cj + dj] = True
        node_id = -np.ones_like(used, dtype=np.int64)
        uj, ui = np.nonzero(used.T)  # row-major in y, then x
        node_id[ui, uj] = np.arange(ui.size)
        self.node_grid = node_id
        self.nodes = np.stack([self.xs[ui], self.ys[uj]], axis=1)

        cj, ci = np.nonzero(active.T)
        self.cell_ij = np.stack([ci, cj], axis=1)
        self.cells = np.stack([node_id[ci, cj], node_id[ci + 1, cj],
                               node_id[ci + 1, cj + 1], node_id[ci, cj + 1]], axis=1)
        self.cell_dx = self.xs[ci + 1] - self.xs[ci]
        self.cell_dy = self.ys[cj + 1] - self.ys[cj]
        self.cell_origin = np.stack([self.xs[ci], self.ys[cj]], axis=1)
        self.subdomain = np.asarray(subdomain)[ci, cj].astype(np.int64)

        def is_active(i, j):
            return 0 <= i < ncx and 0 <= j < ncy and active[i, j]

        edges, tags = [], []
        for i, j in zip(ci, cj):
            sides = (
                ((i, j), (i + 1, j), (i, j - 1)),
                ((i + 1, j), (i + 1, j + 1), (i + 1, j)),
                ((i, j + 1), (i + 1, j + 1), (i, j + 1)),
                ((i, j), (i, j + 1), (i - 1, j)),
            )
            for a, b, nb in sides:
                if is_active(*nb):
                    continue
                p0 = (self.xs[a[0]], self.ys[a[1]])
                p1 = (self.xs[b[0]], self.ys[b[1]])
                edges.append((node_id[a], node_id[b]))
                tags.append(edge_tag(p0, p1))
        self.edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
        self.edge_tags = np.array(tags, dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    def cell_areas(self) -> np.ndarray:
        return self.cell_dx * self.cell_dy

    def edge_lengths(self) -> np.ndarray:
        d = self.nodes[self.edges[:, 1]] - self.nodes[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def boundary_nodes(self, tag: int) -> np.ndarray:
        return np.unique(self.edges[self.edge_tags == tag])

    @cached_property
    def free_nodes(self) -> np.ndarray:
        """Nodes not on a Dirichlet edge, in increasing order."""
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes(DIRICHLET)] = False
        return np.flatnonzero(mask)

    @cached_property
    def dof_map(self) -> np.ndarray:
        """Node -> unknown index, ``-1`` on eliminated Dirichlet nodes."""
        m = -np.ones(self.n_nodes, dtype=np.int64)
        m[self.free_nodes] = np.arange(self.free_nodes.size)
        return m

    def quadrature_points(self) -> np.ndarray:
        """Physical coordinates of the 2x2 Gauss points, shape ``(n_cells, 4, 2)``."""
        pts = CELL_RULE.points
        x = self.cell_origin[:, None, 0] + pts[None, :, 0] * self.cell_dx[:, None]
        y = self.cell_origin[:, None, 1] + pts[None, :, 1] * self.cell_dy[:, None]
        return np.stack([x, y], axis=2)


def build_unit_square_mesh(n: int) -> RectMesh:
    """``n x n`` uniform cells on the unit square, all boundary edges Dirichlet."""
    if n < 1:
        raise ValueError("need at least one cell per direction")
    lines = np.linspace(0.0, 1.0, n + 1)
    return RectMesh(lines, lines, np.ones((n, n), dtype=bool), np.zeros((n, n), dtype=np.int64),
                    lambda p0, p1: DIRICHLET)


FIN_Y_BREAKS = (0.0, 0.75, 1.0, 1.75, 2.0, 2.75, 3.0, 3.75, 4.0)
FIN_X_BREAKS = (0.0, 2.5, 3.5, 6.0)


def _subdivide(breaks, per_unit):
    lines = [breaks[0]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        m = max(1, int(np.ceil((b - a) * per_unit - 1e-9)))
        lines.extend(np.linspace(a, b, m + 1)[1:])
    return np.array(lines)


def build_fin_mesh(nx_per_unit: int) -> RectMesh:
    """Thermal fin: central post (2.5, 3.5) x (0, 4) plus four fins on both sides.

    Subdomain 0 is the post, subdomain ``i`` the fin pair at height
    ``(i - 0.25, i)``.  The base of the post is the Neumann boundary, every
    other exterior edge is Robin.
    """
    if nx_per_unit < 1:
        raise ValueError("nx_per_unit must be >= 1")
    xs = _subdivide(FIN_X_BREAKS, nx_per_unit)
    ys = _subdivide(FIN_Y_BREAKS, nx_per_unit)
    xm = 0.5 * (xs[:-1] + xs[1:])
    ym = 0.5 * (ys[:-1] + ys[1:])
    in_post = (xm > 2.5) & (xm < 3.5)
    fin_id = np.zeros(ym.size, dtype=np.int64)
    for i in range(1, 5):
        fin_id[(ym > i - 0.25) & (ym < i)] = i
    sub = np.where(in_post[:, None], 0, fin_id[None, :])
    active = in_post[:, None] | (fin_id[None, :] > 0)

    def tag(p0, p1):
        if p0[1] == 0.0 and p1[1] == 0.0 and 2.5 <= min(p0[0], p1[0]) and max(p0[0], p1[0]) <= 3.5:
            return NEUMANN
        return ROBIN

    return RectMesh(xs, ys, active, sub, tag)


# assembly ---------------------------------------------------------------------


class _PatternAssembler:
    """Scatter element matrices into a fixed CSR pattern.

    ``row_map``/``col_map`` send mesh nodes to matrix rows/columns; entries with
    a negative target are dropped (eliminated Dirichlet nodes).
    """

    def __init__(self, mesh: RectMesh, row_map, col_map, shape):
        cells = mesh.cells
        r = np.asarray(row_map)[cells][:, :, None] * np.ones((1, 1, 4), dtype=np.int64)
        c = np.asarray(col_map)[cells][:, None, :] * np.ones((1, 4, 1), dtype=np.int64)
        keep = (r >= 0) & (c >= 0)
        self.keep = keep.ravel()
        rk, ck = r.ravel()[self.keep], c.ravel()[self.keep]
        self.pattern = SparseMatrix.from_coo(shape, rk, ck, np.zeros(rk.size))
        keys = self.pattern.row_indices() * shape[1] + self.pattern.indices
        self.slot = np.searchsorted(keys, rk * shape[1] + ck)

    def values(self, local: np.ndarray) -> np.ndarray:
        """Pattern data from element matrices of shape ``(n_cells, 4, 4)``."""
        return np.bincount(self.slot, weights=local.ravel()[self.keep], minlength=self.pattern.nnz)

    def matrix(self, local: np.ndarray) -> SparseMatrix:
        return self.pattern.with_data(self.values(local))


def _grad_products(mesh: RectMesh) -> np.ndarray:
    """``(grad N_a . grad N_b)(x_q) * w_q * |cell|``, shape ``(n_cells, n_q, 4, 4)``."""
    dx, dy = mesh.cell_dx[:, None, None], mesh.cell_dy[:, None, None]
    gx = _DNDS[None] / dx
    gy = _DNDT[None] / dy
    wa = (CELL_RULE.weights[None, :] * mesh.cell_areas()[:, None])[:, :, None, None]
    return wa * (gx[:, :, :, None] * gx[:, :, None, :] + gy[:, :, :, None] * gy[:, :, None, :])


def stiffness_local(mesh: RectMesh) -> np.ndarray:
    return _grad_products(mesh).sum(axis=1)


def mass_local(mesh: RectMesh) -> np.ndarray:
    wa = CELL_RULE.weights[None, :] * mesh.cell_areas()[:, None]
    return np.einsum("eq,qa,qb->eab", wa, _N, _N)


def _identity_map(mesh):
    return np.arange(mesh.n_nodes)


def assemble_stiffness(mesh: RectMesh, eliminate: bool = False) -> SparseMatrix:
    m = mesh.dof_map if eliminate else _identity_map(mesh)
    n = int(m.max()) + 1
    return _PatternAssembler(mesh, m, m, (n, n)).matrix(stiffness_local(mesh))


def assemble_mass(mesh: RectMesh, eliminate: bool = False) -> SparseMatrix:
    m = mesh.dof_map if eliminate else _identity_map(mesh)
    n = int(m.max()) + 1
    return _PatternAssembler(mesh, m, m, (n, n)).matrix(mass_local(mesh))


def interpolate(mesh: RectMesh, func) -> np.ndarray:
    """Nodal values ``func(x, y)``."""
    return np.asarray(func(mesh.nodes[:, 0], mesh.nodes[:, 1]), dtype=np.float64) * np.ones(mesh.n_nodes)


def load_vector(mesh: RectMesh, func) -> np.ndarray:
    """``(f, phi_a)`` with ``f`` evaluated at the Gauss points; all nodes."""
    q = mesh.quadrature_points()
    fq = np.asarray(func(q[..., 0], q[..., 1]), dtype=np.float64) * np.ones(q.shape[:2])
    wa = CELL_RULE.weights[None, :] * mesh.cell_areas()[:, None]
    local = np.einsum("eq,eq,qa->ea", wa, fq, _N)
    return np.bincount(mesh.cells.ravel(), weights=local.ravel(), minlength=mesh.n_nodes)


# thermal fin -------------------------------------------------------------------


class FinOperators:
    """Parameter-independent blocks of the thermal fin system.

    ``A(mu) = sum_i kappa_i K_i + Bi M_R``; the sensitivity column ``i`` holds
    the pattern values of ``K_i`` (``M_R`` for ``i = 5``).
    """

    def __init__(self, mesh: RectMesh):
        if mesh.subdomain.max() > 4:
            raise ValueError("fin mesh has at most five subdomains")
        n = mesh.n_nodes
        m = _identity_map(mesh)
        asm = _PatternAssembler(mesh, m, m, (n, n))
        k_local = stiffness_local(mesh)
        blocks = []
        for i in range(5):
            masked = np.where((mesh.subdomain == i)[:, None, None], k_local, 0.0)
            blocks.append(asm.values(masked))
        robin_vals = self._robin_values(mesh, asm)
        self.pattern = asm.pattern
        cols = np.stack(blocks + [robin_vals], axis=1)
        r, c = np.nonzero(cols)
        self.sensitivity = SparseMatrix.from_coo((asm.pattern.nnz, 6), r, c, cols[r, c])
        self.rhs = self._neumann_load(mesh)

    @staticmethod
    def _edge_mass(mesh, tag):
        sel = mesh.edge_tags == tag
        e = mesh.edges[sel]
        ln = mesh.edge_lengths()[sel]
        s = EDGE_RULE.points
        phi = np.stack([1 - s, s], axis=1)
        local = ln[:, None, None] * np.einsum("q,qa,qb->ab", EDGE_RULE.weights, phi, phi)[None]
        return e, local, ln, phi

    def _robin_values(self, mesh, asm):
        e, local, _, _ = self._edge_mass(mesh, ROBIN)
        rows = np.repeat(e, 2, axis=1).ravel()
        cols = np.tile(e, (1, 2)).ravel()
        m = SparseMatrix.from_coo(asm.pattern.shape, rows, cols, local.ravel())
        keys = asm.pattern.row_indices() * asm.pattern.shape[1] + asm.pattern.indices
        mkeys = m.row_indices() * m.shape[1] + m.indices
        slot = np.searchsorted(keys, mkeys)
        if np.any(keys[np.minimum(slot, keys.size - 1)] != mkeys):
            raise AssertionError("Robin entries outside the stiffness pattern")
        out = np.zeros(asm.pattern.nnz)
        out[slot] = m.data
        return out

    @staticmethod
    def _neumann_load(mesh):
        e, _, ln, phi = FinOperators._edge_mass(mesh, NEUMANN)
        local = ln[:, None] * (EDGE_RULE.weights @ phi)[None, :]
        return np.bincount(e.ravel(), weights=local.ravel(), minlength=mesh.n_nodes)


_FIN_CACHE: dict[int, tuple[RectMesh, FinOperators]] = {}


def fin_operators(mesh: RectMesh) -> FinOperators:
    hit = _FIN_CACHE.get(id(mesh))
    if hit is None or hit[0] is not mesh:
        hit = (mesh, FinOperators(mesh))
        _FIN_CACHE[id(mesh)] = hit
    return hit[1]


def assemble_fin_system(mesh: RectMesh, mu: ad.Var) -> tuple[ad.ParamDependentMatrix, np.ndarray]:
    """``A(mu)`` for ``mu = (kappa_0..kappa_4, Bi)`` and the Neumann load."""
    if mu.size != 6:
        raise ValueError("mu must hold kappa_0..kappa_4 and Bi")
    if np.any(~(mu.value > 0)) or np.any(~np.isfinite(mu.value)):
        raise CoefficientDomainError(f"fin parameters must be positive and finite, got {mu.value}")
    ops = fin_operators(mesh)
    return ad.ParamDependentMatrix.affine(ops.pattern, mu, ops.sensitivity), ops.rhs


def solve_fin(tape: ad.Tape, mesh: RectMesh, mu: ad.Var) -> ad.Var:
    a, rhs = assemble_fin_system(mesh, mu)
    return ad.linear_solve_node(tape, a, rhs)


# variable-coefficient Poisson ------------------------------------------------------


def kappa_poisson_rhs(x, y):
    """Load for ``u = sin(pi x) sin(pi y)`` with ``kappa = 1 + 2x + 3y^2``."""
    pi = np.pi
    return (-6 * pi * y * np.sin(pi * x) * np.cos(pi * y)
            + 2 * pi**2 * (2 * x + 3 * y**2 + 1) * np.sin(pi * x) * np.sin(pi * y)
            - 2 * pi * np.sin(pi * y) * np.cos(pi * x))


def kappa_true(x, y):
    return 1 + 2 * x + 3 * y**2


def u_exact(x, y):
    return np.sin(np.pi * x) * np.sin(np.pi * y)


class KappaPoissonOperators:
    """Sensitivity of the reduced stiffness pattern to nodal ``kappa`` values.

    ``kappa`` is interpolated bilinearly to the Gauss points, so each pattern
    entry is a fixed linear combination of nodal values.
    """

    def __init__(self, mesh: RectMesh):
        m = mesh.dof_map
        n = mesh.free_nodes.size
        asm = _PatternAssembler(mesh, m, m, (n, n))
        gp = _grad_products(mesh)  # (e, q, a, b)
        sens_local = np.einsum("eqab,qc->eabc", gp, _N)
        slots = -np.ones(mesh.n_cells * 16, dtype=np.int64)
        slots[asm.keep] = asm.slot
        rows = np.repeat(slots.reshape(mesh.n_cells, 4, 4)[..., None], 4, axis=3)
        cols = np.broadcast_to(mesh.cells[:, None, None, :], rows.shape)
        keep = rows >= 0
        self.pattern = asm.pattern
        self.sensitivity = SparseMatrix.from_coo(
            (asm.pattern.nnz, mesh.n_nodes), rows[keep], cols[keep], sens_local[keep])


_KP_CACHE: dict[int, tuple[RectMesh, KappaPoissonOperators]] = {}


def kappa_poisson_operators(mesh: RectMesh) -> KappaPoissonOperators:
    hit = _KP_CACHE.get(id(mesh))
    if hit is None or hit[0] is not mesh:
        hit = (mesh, KappaPoissonOperators(mesh))
        _KP_CACHE[id(mesh)] = hit
    return hit[1]


def assemble_kappa_poisson(mesh: RectMesh, kappa: ad.Var, f=kappa_poisson_rhs):
    """``-div(kappa grad u) = f`` with ``u = 0`` on the boundary.

    Returns the reduced matrix (free nodes only) and load vector.
    """
    if kappa.size != mesh.n_nodes:
        raise ValueError(f"need one kappa value per node ({mesh.n_nodes}), got {kappa.size}")
    if np.any(~(kappa.value > 0)):
        raise CoefficientDomainError("kappa must be positive at every node")
    ops = kappa_poisson_operators(mesh)
    rhs = load_vector(mesh, f)[mesh.free_nodes]
    return ad.ParamDependentMatrix.affine(ops.pattern, kappa, ops.sensitivity), rhs


def solve_kappa_poisson(tape: ad.Tape, mesh: RectMesh, kappa: ad.Var, f=kappa_poisson_rhs) -> ad.Var:
    """Nodal solution on all nodes (exact zeros on the Dirichlet boundary)."""
    a, rhs = assemble_kappa_poisson(mesh, kappa, f)
    u = ad.linear_solve_node(tape, a, rhs)
    return ad.scatter(u, mesh.free_nodes, mesh.n_nodes)


# nonlinear heat, one Crank-Nicolson step -----------------------------------------------


class NonlinearHeatOperators:
    """Mass and stiffness blocks shared by every time step on one mesh.

    Rows are the free nodes; ``*_fa`` blocks keep all nodes as columns so the
    previous state may carry boundary values.
    """

    def __init__(self, mesh: RectMesh):
        self.mesh = mesh
        dm = mesh.dof_map
        nf = mesh.free_nodes.size
        allm = _identity_map(mesh)
        self.asm_ff = _PatternAssembler(mesh, dm, dm, (nf, nf))
        self.asm_fa = _PatternAssembler(mesh, dm, allm, (nf, mesh.n_nodes))
        m_loc, k_loc = mass_local(mesh), stiffness_local(mesh)
        self.mass_ff = self.asm_ff.matrix(m_loc)
        self.stiff_ff = self.asm_ff.matrix(k_loc)
        self.mass_fa = self.asm_fa.matrix(m_loc)
        self.stiff_fa = self.asm_fa.matrix(k_loc)
        self.wa = CELL_RULE.weights[None, :] * mesh.cell_areas()[:, None]

    def full(self, u_free):
        out = np.zeros(self.mesh.n_nodes)
        out[self.mesh.free_nodes] = u_free
        return out

    def quad_values(self, u_full):
        return u_full[self.mesh.cells] @ _N.T  # (e, q)

    def square_load(self, u_full):
        """``(u^2, phi_a)`` on the free rows."""
        uq = self.quad_values(u_full)
        local = (self.wa * uq * uq) @ _N
        rows = self.mesh.dof_map[self.mesh.cells].ravel()
        keep = rows >= 0
        return np.bincount(rows[keep], weights=local.ravel()[keep], minlength=self.mesh.free_nodes.size)

    def square_jacobian_local(self, u_full):
        """Element matrices of ``d(u^2, phi_a)/du_b``."""
        uq = self.quad_values(u_full)
        return np.einsum("eq,qa,qb->eab", 2.0 * self.wa * uq, _N, _N)

    def square_vjp(self, u_full, v_free):
        """``v^T d(u^2, phi)/du`` over all nodes."""
        vq = self.quad_values(self.full(v_free))
        uq = self.quad_values(u_full)
        local = (2.0 * self.wa * uq * vq) @ _N
        return np.bincount(self.mesh.cells.ravel(), weights=local.ravel(), minlength=self.mesh.n_nodes)


_NH_CACHE: dict[int, tuple[RectMesh, NonlinearHeatOperators]] = {}


def nonlinear_heat_operators(mesh: RectMesh) -> NonlinearHeatOperators:
    hit = _NH_CACHE.get(id(mesh))
    if hit is None or hit[0] is not mesh:
        hit = (mesh, NonlinearHeatOperators(mesh))
        _NH_CACHE[id(mesh)] = hit
    return hit[1]


class NonlinearHeatStep:
    """Residual of one Crank-Nicolson step; the parameter is the previous state.

    ``R(u) = M u + k/2 K u + k/2 N(u) - [M p - k/2 K p - k/2 N(p) + k/2 M (f_prev + f_n)]``
    with ``u`` on the free nodes and ``p`` on all nodes.
    """

    def __init__(self, mesh: RectMesh, k: float, f_prev, f_n):
        self.ops = nonlinear_heat_operators(mesh)
        self.k = float(k)
        self.load = 0.5 * self.k * self.ops.mass_fa.matvec(np.asarray(f_prev) + np.asarray(f_n))
        o = self.ops
        self._lin_data = o.mass_ff.data + 0.5 * self.k * o.stiff_ff.data

    def residual(self, u, p):
        o, hk = self.ops, 0.5 * self.k
        lhs = o.mass_ff.matvec(u) + hk * o.stiff_ff.matvec(u) + hk * o.square_load(o.full(u))
        rhs = o.mass_fa.matvec(p) - hk * o.stiff_fa.matvec(p) - hk * o.square_load(p) + self.load
        return lhs - rhs

    def jacobian(self, u, p):
        o = self.ops
        nl = o.asm_ff.values(o.square_jacobian_local(o.full(u)))
        return o.asm_ff.pattern.with_data(self._lin_data + 0.5 * self.k * nl)

    def vjp_param(self, u, p, v):
        o, hk = self.ops, 0.5 * self.k
        return -(o.mass_fa.rmatvec(v) - hk * o.stiff_fa.rmatvec(v) - hk * o.square_vjp(p, v))


def nonlinear_heat_residual_system(mesh: RectMesh, k: float, f_prev, f_n) -> NonlinearHeatStep:
    return NonlinearHeatStep(mesh, k, f_prev, f_n)


def heat_source(x, y, t):
    """Source for ``u = exp(t - t^2) sin(pi x) sin(pi y)`` of ``u_t - Lap u + u^2 = f``."""
    s = np.sin(np.pi * x) * np.sin(np.pi * y)
    return ((-2 * t * np.exp(t**2) + np.exp(t) * s + np.exp(t**2) + 2 * np.pi**2 * np.exp(t**2))
            * np.exp(-2 * t**2 + t) * s)


def crank_nicolson_chain(tape: ad.Tape, mesh: RectMesh, u0: ad.Var, n_steps: int, T: float = 1.0,
                         source=heat_source, newton: ad.NewtonConfig = ad.NewtonConfig()):
    """March ``n_steps`` Crank-Nicolson steps from the nodal state ``u0``.

    Returns the list of full nodal states ``[u_1, ..., u_n]``.
    """
    k = T / n_steps
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    free = mesh.free_nodes
    f_prev = source(x, y, 0.0)
    u_prev = u0
    states = []
    for n in range(1, n_steps + 1):
        f_n = source(x, y, n * k)
        sys = NonlinearHeatStep(mesh, k, f_prev, f_n)
        u = ad.nonlinear_solve_node(tape, sys, u_prev, u_prev.value[free], newton)
        u_prev = ad.scatter(u, free, mesh.n_nodes)
        states.append(u_prev)
        f_prev = f_n
    return states


# output ----------------------------------------------------------------------------------


def write_field_csv(path, coords, values, header=("x", "y", "value")) -> None:
    coords = np.asarray(coords)
    values = np.asarray(values)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for c, v in zip(coords, values):
            w.writerow([*(repr(float(ci)) for ci in np.atleast_1d(c)), repr(float(v))])
