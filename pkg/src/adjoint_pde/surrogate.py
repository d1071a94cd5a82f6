"""Sigmoid MLP surrogate for a spatially varying diffusion coefficient."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import fem
from .optimize import BoundedParams, RunRecord, make_optimizer, run_optimization

KAPPA_MIN = 1e-3


def parameter_count(layers: Sequence[int]) -> int:
    return int(sum(a * b + b for a, b in zip(layers[:-1], layers[1:])))


class Mlp:
    """Fully connected network, sigmoid on hidden layers, identity output.

    Parameters live in one flat vector: for each layer the row-major
    ``(n_out, n_in)`` weight matrix followed by the bias.
    """

    def __init__(self, layers: Sequence[int], params=None):
        self.layers = [int(n) for n in layers]
        if len(self.layers) < 2 or min(self.layers) < 1:
            raise ValueError("need at least input and output layer sizes")
        n = parameter_count(self.layers)
        self.params = np.zeros(n) if params is None else np.array(params, dtype=np.float64).ravel()
        if self.params.size != n:
            raise ValueError(f"expected {n} parameters, got {self.params.size}")

    @property
    def n_params(self) -> int:
        return self.params.size

    def _offsets(self):
        off = 0
        for n_in, n_out in zip(self.layers[:-1], self.layers[1:]):
            yield n_in, n_out, off, off + n_in * n_out, off + n_in * n_out + n_out
            off += n_in * n_out + n_out

    def weights(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        n_in, n_out, a, b, c = list(self._offsets())[i]
        return self.params[a:b].reshape(n_out, n_in), self.params[b:c]

    def forward(self, tape: ad.Tape, theta: ad.Var, points) -> ad.Var:
        """Evaluate at ``points`` (shape ``(n, 2)``) with parameters ``theta``."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != self.layers[0]:
            raise ValueError(f"points must have shape (n, {self.layers[0]})")
        h = tape.constant(pts.ravel())
        blocks = list(self._offsets())
        for i, (n_in, n_out, a, b, c) in enumerate(blocks):
            h = ad.affine(h, ad.slice(theta, a, b), ad.slice(theta, b, c), n_in, n_out)
            if i < len(blocks) - 1:
                h = ad.sigmoid(h)
        return h

    def __call__(self, points) -> np.ndarray:
        tape = ad.Tape()
        return self.forward(tape, tape.constant(self.params), points).value.copy()

    def to_json(self) -> dict:
        out = {"layers": self.layers, "weights": [], "biases": []}
        for i in range(len(self.layers) - 1):
            w, b = self.weights(i)
            out["weights"].append(w.ravel().tolist())
            out["biases"].append(b.tolist())
        return out

    @classmethod
    def from_json(cls, data: dict) -> "Mlp":
        flat = []
        for w, b in zip(data["weights"], data["biases"]):
            flat.extend(w)
            flat.extend(b)
        return cls(data["layers"], flat)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "Mlp":
        return cls.from_json(json.loads(Path(path).read_text()))


def mlp_new(layers: Sequence[int], seed: int) -> Mlp:
    """Weights uniform on ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, zero biases."""
    m = Mlp(layers)
    rng = np.random.default_rng(seed)
    for n_in, n_out, a, b, _ in m._offsets():
        bound = 1.0 / np.sqrt(n_in)
        m.params[a:b] = rng.uniform(-bound, bound, size=n_in * n_out)
    return m


def mlp_eval(m: Mlp, points, tape: ad.Tape | None = None, theta: ad.Var | None = None):
    """Network output at ``points``; a variable when ``tape`` is given, else an array."""
    if tape is None:
        return m(points)
    if theta is None:
        theta = tape.variable(m.params, requires_grad=True)
    return m.forward(tape, theta, points)


def _train(m: Mlp, problem, optimizer: str, lr: float, iters: int) -> RunRecord:
    params = BoundedParams(m.params)
    rec = run_optimization(problem, params, make_optimizer(optimizer, m.n_params, lr),
                           tol=0.0, max_iter=iters)
    m.params = params.value.copy()
    return rec


def train_data_driven(m: Mlp, points, targets, optimizer: str = "adam", lr: float = 1e-2,
                      iters: int = 100) -> RunRecord:
    """Regression of the network onto ``targets`` at ``points``."""
    targets = np.asarray(targets, dtype=np.float64)

    def problem(tape, theta):
        return ad.norm2(ad.sub(tape.constant(targets), m.forward(tape, theta, points)))

    return _train(m, problem, optimizer, lr, iters)


def physics_informed_loss(m: Mlp, mesh: fem.RectMesh, u_true, tape: ad.Tape, theta: ad.Var,
                          kappa_min: float | None = KAPPA_MIN, f=fem.kappa_poisson_rhs) -> ad.Var:
    """``||u_true - u(kappa_NN)||`` with the network evaluated at the mesh nodes."""
    kappa = m.forward(tape, theta, mesh.nodes)
    if kappa_min is not None:
        kappa = ad.maximum(kappa, kappa_min)
    u = fem.solve_kappa_poisson(tape, mesh, kappa, f)
    return ad.norm2(ad.sub(tape.constant(u_true), u))


def train_physics_informed(m: Mlp, mesh: fem.RectMesh, u_true, optimizer: str = "adam",
                           lr: float = 1e-2, iters: int = 100,
                           kappa_min: float | None = KAPPA_MIN) -> RunRecord:
    """Fit the network so the PDE solution with ``kappa = NN`` matches ``u_true``.

    ``kappa_min`` floors the coefficient before assembly; pass ``None`` to
    disable the guard (assembly then rejects non-positive values).
    """
    u_true = np.asarray(u_true, dtype=np.float64)

    def problem(tape, theta):
        return physics_informed_loss(m, mesh, u_true, tape, theta, kappa_min)

    return _train(m, problem, optimizer, lr, iters)


def train_mixed(m: Mlp, coarse_mesh: fem.RectMesh, fine_mesh: fem.RectMesh, kappa_coarse,
                u_true_fine, optimizer: str = "adam", lr: float = 1e-2,
                iters_each: int | tuple[int, int] = 100) -> tuple[RunRecord, RunRecord]:
    """Regression on the coarse nodes, then physics-informed fine-tuning."""
    n1, n2 = (iters_each, iters_each) if np.isscalar(iters_each) else iters_each
    rec1 = train_data_driven(m, coarse_mesh.nodes, kappa_coarse, optimizer, lr, n1)
    rec2 = train_physics_informed(m, fine_mesh, u_true_fine, optimizer, lr, n2)
    return rec1, rec2
