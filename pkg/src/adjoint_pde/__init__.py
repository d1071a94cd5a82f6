"""Differentiable sparse PDE solvers for optimal control and parameter estimation."""

__version__ = "0.1.0"
