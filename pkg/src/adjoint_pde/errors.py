"""Exception hierarchy shared by the solver, tape and experiment layers."""

from __future__ import annotations


class AdjointPdeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AdjointPdeError, ValueError):
    """Operand sizes do not match."""


class IndexOutOfRangeError(AdjointPdeError, IndexError):
    def __init__(self, triplet, n_rows, n_cols):
        self.triplet = tuple(triplet)
        self.n_rows = n_rows
        self.n_cols = n_cols
        super().__init__(
            f"triplet {self.triplet} outside a {n_rows}x{n_cols} matrix"
        )


class SingularMatrixError(AdjointPdeError, ArithmeticError):
    """Raised by the LU factorization when no acceptable pivot exists."""

    def __init__(self, pivot: int, magnitude: float = 0.0):
        self.pivot = int(pivot)
        self.magnitude = float(magnitude)
        super().__init__(
            f"matrix is singular at pivot {self.pivot} (|pivot| = {self.magnitude:.3e})"
        )


class NewtonError(AdjointPdeError, ArithmeticError):
    """Newton iteration failed; ``trace`` holds the residual norm per iteration."""

    def __init__(self, message: str, trace: list[float]):
        self.trace = list(trace)
        super().__init__(f"{message}; residual trace: {[f'{r:.3e}' for r in self.trace]}")


class CoefficientDomainError(AdjointPdeError, ValueError):
    """A PDE coefficient left the range where the discrete problem is well posed."""


class ConfigError(AdjointPdeError, ValueError):
    """Invalid experiment configuration."""
