"""Rprop/Adam optimizers, box projection, tracking losses and the optimization loop."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import AdjointPdeError

log = logging.getLogger(__name__)


@dataclass
class BoundedParams:
    """Flat parameter vector with optional elementwise box bounds."""

    value: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64, ndmin=1).ravel()
        n = self.value.size
        for name in ("lower", "upper"):
            b = getattr(self, name)
            if b is not None:
                b = np.broadcast_to(np.asarray(b, dtype=np.float64), (n,)).copy()
                if not np.all(np.isfinite(b)):
                    raise ValueError(f"{name} bounds must be finite")
                setattr(self, name, b)
        if self.lower is not None and self.upper is not None and np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def size(self) -> int:
        return self.value.size

    def leaf(self, tape: ad.Tape) -> ad.Var:
        return tape.variable(self.value, requires_grad=True)

    def project(self) -> "BoundedParams":
        self.value = project(self).value
        return self


def project(params: BoundedParams) -> BoundedParams:
    """Clamp to ``[lower, upper]`` elementwise; returns a new object."""
    v = params.value
    if params.lower is not None:
        v = np.maximum(v, params.lower)
    if params.upper is not None:
        v = np.minimum(v, params.upper)
    return BoundedParams(v, params.lower, params.upper)


def _check_grad(grad, n):
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.size != n:
        raise ValueError(f"gradient of size {grad.size} for {n} parameters")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    return grad


class Rprop:
    """Resilient backpropagation without weight backtracking.

    On a sign flip the step shrinks and the coordinate sits out one update; its
    stored gradient is zeroed so the next comparison is neutral.
    """

    name = "rprop"

    def __init__(self, n: int, lr: float = 0.01, etas=(0.5, 1.2), step_sizes=(1e-6, 50.0)):
        self.eta_minus, self.eta_plus = etas
        self.step_min, self.step_max = step_sizes
        self.step_size = np.full(n, float(lr))
        self.prev_grad = np.zeros(n)

    def step(self, x: np.ndarray, grad) -> np.ndarray:
        grad = _check_grad(grad, self.step_size.size)
        s = np.sign(grad * self.prev_grad)
        factor = np.where(s > 0, self.eta_plus, np.where(s < 0, self.eta_minus, 1.0))
        self.step_size = np.clip(self.step_size * factor, self.step_min, self.step_max)
        grad = np.where(s < 0, 0.0, grad)
        self.prev_grad = grad
        return x - np.sign(grad) * self.step_size


class Adam:
    name = "adam"

    def __init__(self, n: int, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, x: np.ndarray, grad) -> np.ndarray:
        grad = _check_grad(grad, self.m.size)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        bc1 = 1 - self.beta1 ** self.t
        bc2 = 1 - self.beta2 ** self.t
        denom = np.sqrt(self.v) / np.sqrt(bc2) + self.eps
        return x - (self.lr / bc1) * self.m / denom


def rprop_step(state: Rprop, params: BoundedParams, grad) -> BoundedParams:
    return BoundedParams(state.step(params.value, grad), params.lower, params.upper)


def adam_step(state: Adam, params: BoundedParams, grad) -> BoundedParams:
    return BoundedParams(state.step(params.value, grad), params.lower, params.upper)


def make_optimizer(name: str, n: int, lr: float):
    if name == "rprop":
        return Rprop(n, lr=lr)
    if name == "adam":
        return Adam(n, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


# losses ----------------------------------------------------------------------


@dataclass(frozen=True)
class LossSpec:
    """``misfit + alpha * reg``.

    ``misfit`` is the sum of Euclidean norms ``||true_j - guess_j||``, divided by
    the number of snapshots when ``average`` is set.  ``reg`` is ``||q||`` or,
    with ``reference`` given, ``||(q - reference) / reference||``.
    """

    alpha: float = 0.0
    average: bool = False
    reference: tuple | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def tracking_terms(tape: ad.Tape, states_guess, states_true, spec: LossSpec,
                   reg_target: ad.Var | None = None) -> tuple[ad.Var, ad.Var]:
    """Return ``(objective, misfit)`` variables."""
    if isinstance(states_guess, ad.Var):
        states_guess, states_true = [states_guess], [states_true]
    if len(states_guess) != len(states_true):
        raise ValueError("guess and true state lists differ in length")
    terms = [ad.norm2(ad.sub(tape.constant(t), g)) for g, t in zip(states_guess, states_true)]
    misfit = terms[0]
    for term in terms[1:]:
        misfit = misfit + term
    if spec.average:
        misfit = ad.scale(misfit, 1.0 / len(terms))
    if spec.alpha == 0.0 or reg_target is None:
        return misfit, misfit
    q = reg_target
    if spec.reference is not None:
        ref = np.asarray(spec.reference, dtype=np.float64)
        q = (q - ref) / ref
    return misfit + ad.scale(ad.norm2(q), spec.alpha), misfit


def tracking_loss(tape: ad.Tape, states_guess, states_true, spec: LossSpec,
                  reg_target: ad.Var | None = None) -> ad.Var:
    return tracking_terms(tape, states_guess, states_true, spec, reg_target)[0]


# optimization loop -----------------------------------------------------------


@dataclass
class RunRecord:
    """Outcome of one optimization run.

    ``loss_history`` holds the tracking misfit (the reported loss and the
    stopping quantity); ``objective_history`` the full objective including
    regularization.  Both have one entry per evaluated iterate.
    """

    loss_history: list[float] = field(default_factory=list)
    objective_history: list[float] = field(default_factory=list)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    final_params: np.ndarray | None = None
    stop_reason: str = ""
    wall_time: float = 0.0
    iterations: int = 0
    failed: bool = False
    error: str | None = None
    files: dict[str, str] = field(default_factory=dict)

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "loss", "objective"])
            for i, (l, o) in enumerate(zip(self.loss_history, self.objective_history)):
                w.writerow([i, repr(float(l)), repr(float(o))])

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "failed": self.failed,
            "error": self.error,
            "wall_time": self.wall_time,
            "initial_loss": self.loss_history[0] if self.loss_history else None,
            "final_loss": self.loss_history[-1] if self.loss_history else None,
            "final_objective": self.objective_history[-1] if self.objective_history else None,
            "final_params": None if self.final_params is None else self.final_params.tolist(),
            "files": dict(self.files),
        }

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n")


Forward = Callable[[ad.Tape, ad.Var], "ad.Var | tuple[ad.Var, ad.Var]"]


def _evaluate(problem: Forward, x: np.ndarray):
    tape = ad.Tape()
    p = tape.variable(x, requires_grad=True)
    out = problem(tape, p)
    obj, mis = out if isinstance(out, tuple) else (out, out)
    return tape, p, obj, float(mis.value[0])


def run_optimization(problem: Forward, params: BoundedParams, optimizer, tol: float = 1e-6,
                     max_iter: int = 100, snapshot_stride: int = 0,
                     callback: Callable[[int, float], None] | None = None) -> RunRecord:
    """Minimize the objective returned by ``problem`` starting from ``params``.

    ``problem(tape, p)`` records the forward model on a fresh tape and returns
    the objective variable, or ``(objective, misfit)``.  Iteration stops once
    the misfit is at most ``tol`` or after ``max_iter`` optimizer steps.
    ``params`` is updated in place.
    """
    rec = RunRecord()
    t0 = time.perf_counter()
    x = params.value.copy()

    def snap(i):
        if snapshot_stride and i % snapshot_stride == 0:
            rec.snapshots[i] = x.copy()

    try:
        tape, p, obj, mis = _evaluate(problem, x)
        rec.loss_history.append(mis)
        rec.objective_history.append(float(obj.value[0]))
        snap(0)
        while mis > tol and rec.iterations < max_iter:
            grad = tape.backward(obj)[p]
            x = project(BoundedParams(optimizer.step(x, grad), params.lower, params.upper)).value
            rec.iterations += 1
            tape, p, obj, mis = _evaluate(problem, x)
            rec.loss_history.append(mis)
            rec.objective_history.append(float(obj.value[0]))
            snap(rec.iterations)
            if callback is not None:
                callback(rec.iterations, mis)
        rec.stop_reason = "tol" if mis <= tol else "max_iter"
    except (AdjointPdeError, FloatingPointError) as exc:
        log.warning("optimization aborted at iteration %d: %s", rec.iterations, exc)
        rec.failed = True
        rec.error = str(exc)
        rec.stop_reason = "failure"
    params.value = x
    rec.final_params = x.copy()
    rec.wall_time = time.perf_counter() - t0
    return rec
