"""Compressed-row sparse matrices and a direct LU solver with transpose solves."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _lu_kernels
from .errors import IndexOutOfRangeError, ShapeError, SingularMatrixError

PIVOT_TOL = 1e-14


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.flags.writeable = False
    return a


class SparseMatrix:
    """Immutable CSR matrix with sorted, duplicate-free column indices per row.

    Explicit zeros are kept, so a pattern assembled once stays fixed when values
    are recomputed.
    """

    __slots__ = ("shape", "indptr", "indices", "data")

    def __init__(self, shape, indptr, indices, data):
        self.shape = (int(shape[0]), int(shape[1]))
        self.indptr = _frozen(indptr, np.int64)
        self.indices = _frozen(indices, np.int64)
        self.data = _frozen(data, np.float64)
        if self.indptr.shape != (self.shape[0] + 1,) or self.indices.shape != self.data.shape:
            raise ShapeError("inconsistent CSR arrays")

    # construction -----------------------------------------------------------

    @classmethod
    def from_coo(cls, shape, rows, cols, vals) -> "SparseMatrix":
        """Assemble from coordinate arrays; duplicate entries are summed."""
        n_rows, n_cols = int(shape[0]), int(shape[1])
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=np.float64).ravel()
        if not (rows.shape == cols.shape == vals.shape):
            raise ShapeError("rows, cols and vals must have equal length")
        bad = (rows < 0) | (rows >= n_rows) | (cols < 0) | (cols >= n_cols)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise IndexOutOfRangeError((int(rows[i]), int(cols[i]), float(vals[i])), n_rows, n_cols)
        if rows.size == 0:
            return cls((n_rows, n_cols), np.zeros(n_rows + 1), np.zeros(0), np.zeros(0))
        key = rows * n_cols + cols
        order = np.argsort(key, kind="stable")
        key = key[order]
        starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
        data = np.add.reduceat(vals[order], starts)
        ukey = key[starts]
        r = ukey // n_cols
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(r, minlength=n_rows), out=indptr[1:])
        return cls((n_rows, n_cols), indptr, ukey % n_cols, data)

    @classmethod
    def from_dense(cls, a) -> "SparseMatrix":
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        r, c = np.nonzero(a)
        return cls.from_coo(a.shape, r, c, a[r, c])

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls.diag(np.ones(n))

    @classmethod
    def diag(cls, d) -> "SparseMatrix":
        d = np.asarray(d, dtype=np.float64)
        n = d.size
        return cls((n, n), np.arange(n + 1), np.arange(n), d)

    def with_data(self, data) -> "SparseMatrix":
        """Same pattern, new values."""
        return SparseMatrix(self.shape, self.indptr, self.indices, data)

    # inspection -------------------------------------------------------------

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def row_indices(self) -> np.ndarray:
        """Row index of every stored entry, aligned with ``indices``/``data``."""
        return np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        np.add.at(out, (self.row_indices(), self.indices), self.data)
        return out

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"

    # algebra ----------------------------------------------------------------

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.shape[1],):
            raise ShapeError(f"cannot multiply {self.shape} matrix by vector of shape {x.shape}")
        return np.bincount(self.row_indices(), weights=self.data * x[self.indices],
                           minlength=self.shape[0])

    def rmatvec(self, y) -> np.ndarray:
        """Return ``A.T @ y``."""
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.shape[0],):
            raise ShapeError(f"cannot multiply transpose of {self.shape} matrix by shape {y.shape}")
        return np.bincount(self.indices, weights=self.data * y[self.row_indices()],
                           minlength=self.shape[1])

    def __matmul__(self, x):
        return self.matvec(x)

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix.from_coo(self.shape[::-1], self.indices, self.row_indices(), self.data)

    @property
    def T(self) -> "SparseMatrix":
        return self.transpose()

    def __add__(self, other: "SparseMatrix") -> "SparseMatrix":
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        if other.shape != self.shape:
            raise ShapeError(f"cannot add {self.shape} and {other.shape}")
        return SparseMatrix.from_coo(
            self.shape,
            np.r_[self.row_indices(), other.row_indices()],
            np.r_[self.indices, other.indices],
            np.r_[self.data, other.data],
        )

    def __neg__(self) -> "SparseMatrix":
        return self.with_data(-self.data)

    def __sub__(self, other: "SparseMatrix") -> "SparseMatrix":
        return self + (-other)

    def __mul__(self, alpha) -> "SparseMatrix":
        return self.with_data(float(alpha) * self.data)

    __rmul__ = __mul__

    def submatrix(self, rows, cols) -> "SparseMatrix":
        """Extract ``A[rows][:, cols]`` for index arrays ``rows`` and ``cols``."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        col_map = -np.ones(self.shape[1], dtype=np.int64)
        col_map[cols] = np.arange(cols.size)
        row_map = -np.ones(self.shape[0], dtype=np.int64)
        row_map[rows] = np.arange(rows.size)
        r = row_map[self.row_indices()]
        c = col_map[self.indices]
        keep = (r >= 0) & (c >= 0)
        return SparseMatrix.from_coo((rows.size, cols.size), r[keep], c[keep], self.data[keep])

    def to_csc(self):
        """Return ``(colptr, rowidx, values)`` of the same matrix."""
        t = self.transpose()
        return t.indptr, t.indices, t.data

    def write_matrix_market(self, path) -> None:
        lines = ["%%MatrixMarket matrix coordinate real general",
                 f"{self.shape[0]} {self.shape[1]} {self.nnz}"]
        for r, c, v in zip(self.row_indices(), self.indices, self.data):
            lines.append(f"{r + 1} {c + 1} {float(v)!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def from_triplets(n: int, triplets: Iterable[Sequence[float]]) -> SparseMatrix:
    """Square ``n x n`` matrix from ``(row, col, value)`` triplets; duplicates are summed."""
    trip = list(triplets)
    for t in trip:
        r, c = int(t[0]), int(t[1])
        if not (0 <= r < n and 0 <= c < n):
            raise IndexOutOfRangeError((r, c, float(t[2])), n, n)
    if not trip:
        return SparseMatrix.from_coo((n, n), [], [], [])
    r, c, v = zip(*trip)
    return SparseMatrix.from_coo((n, n), r, c, v)


def spmv(a: SparseMatrix, x) -> np.ndarray:
    return a.matvec(x)


def kron(a: SparseMatrix, b: SparseMatrix) -> SparseMatrix:
    """Kronecker product; block ``(i, j)`` of the result is ``a[i, j] * b``."""
    p, q = b.shape
    ra, ca, va = a.row_indices(), a.indices, a.data
    rb, cb, vb = b.row_indices(), b.indices, b.data
    rows = (ra[:, None] * p + rb[None, :]).ravel()
    cols = (ca[:, None] * q + cb[None, :]).ravel()
    vals = (va[:, None] * vb[None, :]).ravel()
    return SparseMatrix.from_coo((a.shape[0] * p, a.shape[1] * q), rows, cols, vals)


def shift_matrix(n: int) -> SparseMatrix:
    """Lower shift: ones on the first subdiagonal."""
    if n < 1:
        raise ValueError("shift_matrix needs n >= 1")
    i = np.arange(1, n)
    return SparseMatrix.from_coo((n, n), i, i - 1, np.ones(n - 1))


class LuFactorization:
    """Sparse LU factors ``P A Q = L U`` of a square matrix.

    ``col_perm`` is an optional fill-reducing column ordering; rows are always
    chosen by partial pivoting.
    """

    def __init__(self, a: SparseMatrix, col_perm=None, pivot_tol: float = PIVOT_TOL):
        n, m = a.shape
        if n != m:
            raise ShapeError(f"LU factorization needs a square matrix, got {a.shape}")
        self.n = n
        q = np.arange(n, dtype=np.int64) if col_perm is None else np.asarray(col_perm, dtype=np.int64)
        if q.shape != (n,) or not np.array_equal(np.sort(q), np.arange(n)):
            raise ValueError("col_perm must be a permutation of range(n)")
        self.q = q
        rowmax = np.zeros(n)
        if a.nnz:
            np.maximum.at(rowmax, a.row_indices(), np.abs(a.data))
        colptr, rowidx, vals = a.to_csc()
        status, *factors, mag = _lu_kernels.lu_factor(
            n, colptr, rowidx, vals, q, rowmax, pivot_tol
        )
        if status >= 0:
            raise SingularMatrixError(status, mag)
        self._factors = tuple(factors)

    @property
    def nnz(self) -> int:
        lp, _, _, up, *_ = self._factors
        return int(lp[-1] + up[-1])

    def _check(self, b):
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (self.n,):
            raise ShapeError(f"right-hand side of shape {b.shape} for a system of size {self.n}")
        return np.ascontiguousarray(b)

    def solve(self, b) -> np.ndarray:
        return _lu_kernels.lu_solve(self.n, *self._factors, self.q, self._check(b))

    def solve_transpose(self, b) -> np.ndarray:
        return _lu_kernels.lu_solve_transpose(self.n, *self._factors, self.q, self._check(b))


def lu_factorize(a: SparseMatrix, col_perm=None) -> LuFactorization:
    return LuFactorization(a, col_perm=col_perm)


def solve(fact: LuFactorization, b) -> np.ndarray:
    return fact.solve(b)


def solve_transpose(fact: LuFactorization, b) -> np.ndarray:
    return fact.solve_transpose(b)
