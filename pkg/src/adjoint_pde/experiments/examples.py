"""The recovery experiments: observations, forward models, outputs and gradient checks."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import autodiff as ad
from .. import fd, fem
from .. import surrogate as sg
from ..errors import ConfigError
from ..optimize import BoundedParams, LossSpec, RunRecord, make_optimizer, run_optimization, tracking_terms
from ..sparse import lu_factorize
from .config import ExperimentConfig

log = logging.getLogger(__name__)

# config keys that determine the observations of each example
OBS_KEYS = {
    "ex1": ("n_h", "f_true"),
    "ex2": ("n_h",),
    "ex3": ("n_h", "n_k", "T"),
    "ex4": ("n_h", "n_k", "T"),
    "ex5": ("mesh", "mu_true"),
    "ex6": ("mesh", "n_k", "T"),
    "ex9": ("mesh", "coarse_mesh"),
}


def heat_force(x, t):
    """Space-time source used for the 1+1D heat examples."""
    return np.pi**2 * np.sin(np.pi * x) * np.exp(-t)


def heat_initial(x):
    return np.sin(np.pi * x)


@dataclass
class Problem:
    forward: Callable
    params: BoundedParams
    fields: Callable[[np.ndarray], dict[str, tuple[tuple[str, ...], np.ndarray]]]
    param_names: list[str] | None = None


def _spacetime_force(g: fd.Grid1D, t: fd.TimeGrid) -> np.ndarray:
    return heat_force(g.x[None, :], t.t[:, None]).ravel()


def _grids(cfg):
    return fd.Grid1D(cfg.n_h), fd.TimeGrid(cfg.n_k, cfg.T)


# observations -------------------------------------------------------------------


def _observe_ex1(cfg):
    g = fd.Grid1D(cfg.n_h)
    return {"u_true": fd.poisson1d_solution(g, cfg.f_true)}


def _observe_ex2(cfg):
    g = fd.Grid1D(cfg.n_h)
    f = np.pi**2 * np.sin(np.pi * g.x)
    return {"u_true": fd.poisson1d_solution(g, f), "f_true": f}


def _observe_ex3(cfg):
    g, t = _grids(cfg)
    rhs = fd.heat_spacetime_rhs(g, t, _spacetime_force(g, t), heat_initial(g.x))
    u = lu_factorize(fd.heat_spacetime_matrix(g, t)).solve(rhs)
    return {"u_true": u, "f_true": rhs}


def _observe_ex4(cfg):
    g, t = _grids(cfg)
    tape = ad.Tape()
    u0 = heat_initial(g.x)
    states = fd.backward_euler_chain(tape, g, t, _spacetime_force(g, t), u0)
    return {"states_true": np.stack([u0] + [s.value for s in states]), "u0_true": u0}


def _observe_ex5(cfg):
    mesh = fem.build_fin_mesh(cfg.mesh)
    tape = ad.Tape()
    return {"u_true": fem.solve_fin(tape, mesh, tape.constant(cfg.mu_true)).value.copy()}


def _observe_ex6(cfg):
    mesh = fem.build_unit_square_mesh(cfg.mesh)
    tape = ad.Tape()
    u0 = fem.interpolate(mesh, fem.u_exact)
    states = fem.crank_nicolson_chain(tape, mesh, tape.constant(u0), cfg.n_k, cfg.T)
    return {"u0_true": u0, "uT_true": states[-1].value.copy(),
            "center_true": np.array([s.value[_center(mesh)] for s in states])}


def _observe_ex9(cfg):
    fine = fem.build_unit_square_mesh(cfg.mesh)
    coarse = fem.build_unit_square_mesh(cfg.coarse_mesh)
    kappa = fem.interpolate(fine, fem.kappa_true)
    tape = ad.Tape()
    u = fem.solve_kappa_poisson(tape, fine, tape.constant(kappa)).value.copy()
    return {"u_true": u, "kappa_fine": kappa, "kappa_coarse": fem.interpolate(coarse, fem.kappa_true)}


OBSERVERS = {"ex1": _observe_ex1, "ex2": _observe_ex2, "ex3": _observe_ex3, "ex4": _observe_ex4,
             "ex5": _observe_ex5, "ex6": _observe_ex6, "ex9": _observe_ex9}

# arrays that play the role of measured data and receive noise
NOISY = {"u_true", "states_true", "uT_true", "u0_true"}


def _center(mesh):
    return int(np.argmin(np.hypot(mesh.nodes[:, 0] - 0.5, mesh.nodes[:, 1] - 0.5)))


def _obs_meta(cfg: ExperimentConfig) -> dict:
    d = cfg.model_dump()
    meta = {k: d[k] for k in OBS_KEYS[cfg.example]}
    meta.update(example=cfg.example, noise_sigma=cfg.noise_sigma, noise_seed=cfg.noise_seed)
    return json.loads(json.dumps(meta))


def obs_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.obs_dir) / cfg.example


def generate_observations(cfg: ExperimentConfig, persist: bool = True) -> dict[str, np.ndarray]:
    """Forward-solve with the true parameters; optionally add seeded Gaussian noise."""
    obs = OBSERVERS[cfg.example](cfg)
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(cfg.noise_seed)
        for name in sorted(obs):
            if name in NOISY:
                obs[name] = obs[name] + cfg.noise_sigma * rng.standard_normal(obs[name].shape)
    if persist:
        d = obs_path(cfg)
        d.mkdir(parents=True, exist_ok=True)
        for name, arr in sorted(obs.items()):
            np.save(d / f"{name}.npy", np.asarray(arr, dtype=np.float64))
        (d / "meta.json").write_text(json.dumps(_obs_meta(cfg), indent=2, sort_keys=True) + "\n")
    return obs


def load_observations(cfg: ExperimentConfig) -> dict[str, np.ndarray] | None:
    d = obs_path(cfg)
    meta_file = d / "meta.json"
    if not meta_file.exists():
        return None
    meta = json.loads(meta_file.read_text())
    if meta != _obs_meta(cfg):
        raise ConfigError(
            f"observations in {d} were generated with {meta}, which does not match the "
            f"current settings {_obs_meta(cfg)}; run 'adjoint-pde observe' or choose another obs_dir")
    return {p.stem: np.load(p) for p in sorted(d.glob("*.npy"))}


def observations_for(cfg: ExperimentConfig) -> dict[str, np.ndarray]:
    obs = load_observations(cfg)
    if obs is None:
        log.info("no observations under %s; generating and saving them", obs_path(cfg))
        generate_observations(cfg)
        obs = load_observations(cfg)
    return obs


# forward problems -------------------------------------------------------------------


def _problem_ex1(cfg, obs):
    g = fd.Grid1D(cfg.n_h)
    k = fd.poisson1d_stiffness(g)
    fact = lu_factorize(k)
    ones = np.ones(g.n_interior)
    u_true = obs["u_true"]

    def forward(tape, f):
        u = ad.linear_solve_node(tape, k, ad.mul(ones, f), factorization=fact)
        return tracking_terms(tape, u, u_true, LossSpec())

    def fields(p):
        return {"solution.csv": (("x", "true", "recovered"),
                                 np.c_[g.x, u_true, fact.solve(p[0] * ones)])}

    return Problem(forward, BoundedParams([cfg.f_guess]), fields, ["f"])


def _problem_ex2(cfg, obs):
    g = fd.Grid1D(cfg.n_h)
    k = fd.poisson1d_stiffness(g)
    fact = lu_factorize(k)
    u_true = obs["u_true"]
    spec = LossSpec(alpha=cfg.alpha)

    def forward(tape, f):
        u = ad.linear_solve_node(tape, k, f, factorization=fact)
        return tracking_terms(tape, u, u_true, spec, reg_target=f)

    def fields(p):
        return {"force.csv": (("x", "true", "recovered"), np.c_[g.x, obs["f_true"], p]),
                "solution.csv": (("x", "true", "recovered"), np.c_[g.x, u_true, fact.solve(p)])}

    return Problem(forward, BoundedParams(np.zeros(g.n_interior)), fields)


def _problem_ex3(cfg, obs):
    g, t = _grids(cfg)
    a = fd.heat_spacetime_matrix(g, t)
    fact = lu_factorize(a)
    u_true = obs["u_true"]
    spec = LossSpec(alpha=cfg.alpha)

    def forward(tape, f):
        u = ad.linear_solve_node(tape, a, f, factorization=fact)
        return tracking_terms(tape, u, u_true, spec, reg_target=f)

    def fields(p):
        xx, tt = np.meshgrid(g.x, t.t)
        mid = g.n_interior // 2
        u = fact.solve(p).reshape(t.n_k, -1)
        ut = u_true.reshape(t.n_k, -1)
        return {"force.csv": (("x", "t", "true", "recovered"),
                              np.c_[xx.ravel(), tt.ravel(), obs["f_true"], p]),
                "center_history.csv": (("t", "true", "recovered"), np.c_[t.t, ut[:, mid], u[:, mid]])}

    return Problem(forward, BoundedParams(np.zeros(t.n_k * g.n_interior)), fields)


def _problem_ex4(cfg, obs):
    g, t = _grids(cfg)
    force = _spacetime_force(g, t)
    states_true = list(obs["states_true"])
    spec = LossSpec(alpha=cfg.alpha, average=True)

    def forward(tape, u0):
        states = [u0] + fd.backward_euler_chain(tape, g, t, force, u0)
        return tracking_terms(tape, states, states_true, spec, reg_target=u0)

    def fields(p):
        return {"initial_condition.csv": (("x", "true", "recovered"), np.c_[g.x, obs["u0_true"], p])}

    return Problem(forward, BoundedParams(np.zeros(g.n_interior)), fields)


FIN_LOWER = (0.1, 0.1, 0.1, 0.1, 0.1, 0.01)
FIN_UPPER = (10.0, 10.0, 10.0, 10.0, 10.0, 1.0)


def _problem_ex5(cfg, obs):
    mesh = fem.build_fin_mesh(cfg.mesh)
    u_true = obs["u_true"]
    spec = LossSpec(alpha=cfg.alpha, reference=tuple(cfg.mu_ref))

    def forward(tape, mu):
        u = fem.solve_fin(tape, mesh, mu)
        return tracking_terms(tape, u, u_true, spec, reg_target=mu)

    def fields(p):
        tape = ad.Tape()
        u = fem.solve_fin(tape, mesh, tape.constant(p)).value
        return {"solution_true.csv": (("x", "y", "value"), np.c_[mesh.nodes, u_true]),
                "solution_recovered.csv": (("x", "y", "value"), np.c_[mesh.nodes, u])}

    params = BoundedParams(cfg.mu_guess, FIN_LOWER, FIN_UPPER).project()
    return Problem(forward, params, fields, ["kappa0", "kappa1", "kappa2", "kappa3", "kappa4", "Bi"])


def _problem_ex6(cfg, obs):
    mesh = fem.build_unit_square_mesh(cfg.mesh)
    spec = LossSpec(alpha=cfg.alpha)
    targets = [obs["u0_true"], obs["uT_true"]]

    def forward(tape, u0):
        states = fem.crank_nicolson_chain(tape, mesh, u0, cfg.n_k, cfg.T)
        return tracking_terms(tape, [u0, states[-1]], targets, spec, reg_target=u0)

    def fields(p):
        tape = ad.Tape()
        states = fem.crank_nicolson_chain(tape, mesh, tape.constant(p), cfg.n_k, cfg.T)
        c = _center(mesh)
        times = np.arange(1, cfg.n_k + 1) * (cfg.T / cfg.n_k)
        return {"initial_condition_true.csv": (("x", "y", "value"), np.c_[mesh.nodes, obs["u0_true"]]),
                "initial_condition_recovered.csv": (("x", "y", "value"), np.c_[mesh.nodes, p]),
                "center_history.csv": (("t", "true", "recovered"),
                                       np.c_[times, obs["center_true"], [s.value[c] for s in states]])}

    return Problem(forward, BoundedParams(np.zeros(mesh.n_nodes)), fields)


PROBLEMS = {"ex1": _problem_ex1, "ex2": _problem_ex2, "ex3": _problem_ex3, "ex4": _problem_ex4,
            "ex5": _problem_ex5, "ex6": _problem_ex6}


# running -------------------------------------------------------------------------------


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in np.atleast_2d(rows):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _finish(cfg, rec: RunRecord, out: Path, fields: dict, names=None, extra=None) -> RunRecord:
    out.mkdir(parents=True, exist_ok=True)
    rec.write_loss_csv(out / "loss_history.csv")
    rec.files["loss_history"] = str(out / "loss_history.csv")
    for fname, (header, rows) in fields.items():
        _write_rows(out / fname, header, rows)
        rec.files[Path(fname).stem] = str(out / fname)
    final = {"params": rec.final_params.tolist()}
    if names:
        final.update({n: float(v) for n, v in zip(names, rec.final_params)})
    if extra:
        final.update(extra)
    (out / "params_final.json").write_text(json.dumps(final, indent=2) + "\n")
    rec.files["params_final"] = str(out / "params_final.json")
    summary = rec.summary()
    summary["config"] = cfg.to_dict()
    summary["example"] = cfg.example
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return rec


def run_example(cfg: ExperimentConfig, obs: dict | None = None) -> RunRecord:
    """Run one recovery experiment and write its outputs to ``cfg.out_dir``."""
    out = Path(cfg.out_dir or Path("runs") / cfg.example)
    obs = observations_for(cfg) if obs is None else obs
    if cfg.example == "ex9":
        return _run_ex9(cfg, obs, out)
    prob = PROBLEMS[cfg.example](cfg, obs)
    opt = make_optimizer(cfg.optimizer, prob.params.size, cfg.lr)
    rec = run_optimization(prob.forward, prob.params, opt, tol=cfg.tol, max_iter=cfg.max_iter,
                           snapshot_stride=cfg.snapshot_stride)
    return _finish(cfg, rec, out, prob.fields(rec.final_params), prob.param_names)


def _run_ex9(cfg, obs, out):
    fine = fem.build_unit_square_mesh(cfg.mesh)
    coarse = fem.build_unit_square_mesh(cfg.coarse_mesh)
    m = sg.mlp_new([2, cfg.hidden, 1], cfg.seed)
    n1 = cfg.iters_stage1 or cfg.max_iter
    n2 = cfg.iters_stage2 or cfg.max_iter
    pre = None
    if cfg.mode == "data":
        rec = sg.train_data_driven(m, fine.nodes, obs["kappa_fine"], cfg.optimizer, cfg.lr, cfg.max_iter)
    elif cfg.mode == "physics":
        rec = sg.train_physics_informed(m, fine, obs["u_true"], cfg.optimizer, cfg.lr, cfg.max_iter,
                                        cfg.kappa_min)
    else:
        pre, rec = sg.train_mixed(m, coarse, fine, obs["kappa_coarse"], obs["u_true"], cfg.optimizer,
                                  cfg.lr, (n1, n2))
    out.mkdir(parents=True, exist_ok=True)
    if pre is not None:
        pre.write_loss_csv(out / "pretrain_loss_history.csv")
        rec.files["pretrain_loss_history"] = str(out / "pretrain_loss_history.csv")
    m.save(out / "weights.json")
    rec.files["weights"] = str(out / "weights.json")
    kappa = m(fine.nodes)
    err = kappa - obs["kappa_fine"]
    fields = {"kappa.csv": (("x", "y", "value"), np.c_[fine.nodes, kappa]),
              "kappa_error.csv": (("x", "y", "value"), np.c_[fine.nodes, err])}
    return _finish(cfg, rec, out, fields,
                   extra={"kappa_max_error": float(np.abs(err).max()), "layers": m.layers})


# gradient checks ------------------------------------------------------------------------


GRADCHECK_OVERRIDES = {
    "ex1": dict(n_h=10),
    "ex2": dict(n_h=10),
    "ex3": dict(n_h=6, n_k=4),
    "ex4": dict(n_h=8, n_k=5),
    "ex5": dict(mesh=1),
    "ex6": dict(mesh=3, n_k=5),
    "ex9": dict(mesh=4, coarse_mesh=2, hidden=5),
}

GRADCHECK_TOL = {"ex1": 1e-6, "ex2": 1e-6, "ex3": 1e-6, "ex4": 1e-6, "ex5": 1e-6,
                 "ex6": 1e-5, "ex9": 1e-5}


def gradcheck_cases(cfg: ExperimentConfig, seed: int = 0):
    """``(name, loss_fn, x0, tol)`` tuples at a random feasible point on a coarse setup."""
    small = cfg.model_copy(update=GRADCHECK_OVERRIDES[cfg.example])
    rng = np.random.default_rng(seed)
    obs = generate_observations(small, persist=False)
    tol = GRADCHECK_TOL[cfg.example]

    def objective(fwd):
        return lambda tape, x: fwd(tape, x)[0]

    if small.example == "ex9":
        fine = fem.build_unit_square_mesh(small.mesh)
        m = sg.mlp_new([2, small.hidden, 1], seed)
        # keep kappa well above the positivity floor so the clamp stays inactive
        m.params[-1] = 2.0 + np.abs(m(fine.nodes)).max()
        m.params += 0.1 * rng.standard_normal(m.n_params) * (np.arange(m.n_params) < m.n_params - 1)

        def physics(tape, theta):
            return sg.physics_informed_loss(m, fine, obs["u_true"], tape, theta, small.kappa_min)

        def data(tape, theta):
            return ad.norm2(ad.sub(tape.constant(obs["kappa_fine"]), m.forward(tape, theta, fine.nodes)))

        return [("ex9-physics", physics, m.params.copy(), tol), ("ex9-data", data, m.params.copy(), tol)]

    prob = PROBLEMS[small.example](small, obs)
    n = prob.params.size
    if small.example == "ex5":
        lo, hi = np.array(FIN_LOWER), np.array(FIN_UPPER)
        x0 = lo + (hi - lo) * rng.uniform(0.1, 0.9, n)
    elif small.example == "ex1":
        x0 = rng.uniform(-2, 2, n)
    else:
        x0 = rng.uniform(-1, 1, n)
    return [(small.example, objective(prob.forward), x0, tol)]


def run_gradcheck(cfg: ExperimentConfig, seed: int = 0) -> list[tuple[str, float, float]]:
    return [(name, ad.gradient_check(f, x0), tol) for name, f, x0, tol in gradcheck_cases(cfg, seed)]
