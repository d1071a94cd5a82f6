import json
import subprocess
import sys

import numpy as np
import pytest

from adjoint_pde import autodiff as ad
from adjoint_pde import fd
from adjoint_pde.errors import ConfigError, NewtonError, SingularMatrixError
from adjoint_pde.experiments import cli
from adjoint_pde.experiments.config import (
    DEFAULTS,
    MU_TRUE,
    load_config,
    parse_config_text,
    parse_overrides,
    parse_value,
)
from adjoint_pde.experiments.examples import (
    PROBLEMS,
    generate_observations,
    load_observations,
    observations_for,
    run_example,
)


def cfg_for(tmp_path, example, **over):
    over.setdefault("obs_dir", str(tmp_path / "obs"))
    return load_config(example, overrides=over, out_dir=tmp_path / "out" / example)


class TestConfig:
    def test_parse_values(self):
        assert parse_value("3") == 3
        assert parse_value("1e-6") == 1e-6
        assert parse_value("rprop") == "rprop"
        assert parse_value("[1, 2]") == [1, 2]
        assert parse_value("0.5,0.5,1") == [0.5, 0.5, 1]

    def test_parse_file(self):
        text = "# settings\nlr = 0.2\n\nn_h = 20   # finer\noptimizer = adam\n"
        assert parse_config_text(text) == {"lr": 0.2, "n_h": 20, "optimizer": "adam"}
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("lr = 1\njunk\n")

    def test_defaults_and_aliases(self):
        c = load_config("ex1_poisson_scalar_force")
        assert c.example == "ex1" and c.n_h == 50 and c.f_true == -1.0 and c.f_guess == 2.0
        assert c.optimizer == "rprop" and c.lr == 0.1
        assert load_config("ex5").mu_true == MU_TRUE
        assert load_config("ex9").hidden == 20

    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("example = ex2\nalpha = 0.5\nmax_iter = 10\n")
        c = load_config("ex2", path, parse_overrides(["max_iter=3"]))
        assert c.alpha == 0.5 and c.max_iter == 3

    def test_file_for_other_example(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("example = ex3\n")
        with pytest.raises(ConfigError, match="ex3"):
            load_config("ex2", path)

    @pytest.mark.parametrize("over,msg", [
        ({"bogus": 1}, "bogus"),
        ({"lr": -1}, "lr"),
        ({"n_h": 1}, "n_h"),
        ({"optimizer": "sgd"}, "optimizer"),
        ({"alpha": -0.1}, "alpha"),
        ({"mu_guess": [1, 2]}, "mu_guess"),
    ])
    def test_rejects(self, over, msg):
        example = "ex5" if "mu_guess" in over else "ex1"
        with pytest.raises(ConfigError, match=msg):
            load_config(example, overrides=over)

    def test_unknown_example(self):
        with pytest.raises(ConfigError, match="unknown example"):
            load_config("ex7")

    def test_bad_override_syntax(self):
        with pytest.raises(ConfigError):
            parse_overrides(["lr0.1"])

    def test_every_example_has_defaults(self):
        for ex in DEFAULTS:
            load_config(ex)


class TestObservations:
    def test_ex1_true_state(self, tmp_path):
        obs = generate_observations(cfg_for(tmp_path, "ex1"))
        # K_h is positive definite, so f = -1 gives u = -x(1 - x)/2
        assert abs(obs["u_true"][24] + 0.125) <= 1e-14

    def test_repeat_is_byte_identical(self, tmp_path):
        c = cfg_for(tmp_path, "ex2")
        generate_observations(c)
        first = (tmp_path / "obs" / "ex2" / "u_true.npy").read_bytes()
        generate_observations(c)
        assert (tmp_path / "obs" / "ex2" / "u_true.npy").read_bytes() == first

    def test_zero_noise_equals_noiseless(self, tmp_path):
        a = generate_observations(cfg_for(tmp_path, "ex1"), persist=False)
        b = generate_observations(cfg_for(tmp_path, "ex1", noise_sigma=0.0, noise_seed=5), persist=False)
        assert a["u_true"].tobytes() == b["u_true"].tobytes()

    def test_noise_is_seeded(self, tmp_path):
        a = generate_observations(cfg_for(tmp_path, "ex1", noise_sigma=1e-3, noise_seed=1), persist=False)
        b = generate_observations(cfg_for(tmp_path, "ex1", noise_sigma=1e-3, noise_seed=1), persist=False)
        c = generate_observations(cfg_for(tmp_path, "ex1"), persist=False)
        assert a["u_true"].tobytes() == b["u_true"].tobytes()
        assert 1e-4 < np.std(a["u_true"] - c["u_true"]) < 1e-2

    def test_generated_once_then_reused(self, tmp_path):
        c = cfg_for(tmp_path, "ex1")
        assert load_observations(c) is None
        observations_for(c)
        path = tmp_path / "obs" / "ex1" / "u_true.npy"
        np.save(path, np.full(49, 7.0))
        assert np.all(observations_for(c)["u_true"] == 7.0)

    def test_mismatched_observations_rejected(self, tmp_path):
        observations_for(cfg_for(tmp_path, "ex1"))
        with pytest.raises(ConfigError, match="does not match"):
            observations_for(cfg_for(tmp_path, "ex1", n_h=20))


class TestRunExample:
    def test_ex1_outputs(self, tmp_path):
        c = cfg_for(tmp_path, "ex1")
        rec = run_example(c)
        out = tmp_path / "out" / "ex1"
        for name in ("loss_history.csv", "params_final.json", "summary.json", "solution.csv"):
            assert (out / name).exists()
        final = json.loads((out / "params_final.json").read_text())
        assert final["f"] == rec.final_params[0]
        summary = json.loads((out / "summary.json").read_text())
        assert summary["stop_reason"] == "tol" and summary["config"]["n_h"] == 50
        assert abs(rec.final_params[0] + 1) <= 1e-5

    def test_ex1_start_at_truth(self, tmp_path):
        rec = run_example(cfg_for(tmp_path, "ex1", f_guess=-1.0))
        assert rec.iterations == 0 and rec.stop_reason == "tol"

    def test_ex5_start_at_truth(self, tmp_path):
        c = cfg_for(tmp_path, "ex5", mesh=1, mu_guess=list(MU_TRUE), alpha=0.0, max_iter=0)
        rec = run_example(c)
        assert rec.loss_history[0] == 0.0

    @pytest.mark.parametrize("example,over", [
        ("ex1", {}),
        ("ex2", {"n_h": 12}),
        ("ex3", {"n_h": 8, "n_k": 4}),
        ("ex4", {"n_h": 8, "n_k": 5}),
        ("ex5", {"mesh": 1}),
        ("ex6", {"mesh": 3, "n_k": 4}),
    ])
    def test_first_loss_matches_recomputation(self, tmp_path, example, over):
        c = cfg_for(tmp_path, example, max_iter=2, **over)
        rec = run_example(c)
        obs = observations_for(c)
        prob = PROBLEMS[example](c, obs)
        tape = ad.Tape()
        x0 = prob.params.value
        _, mis = prob.forward(tape, tape.constant(x0))
        assert abs(rec.loss_history[0] - mis.value[0]) <= 1e-12 * max(1, abs(mis.value[0]))
        # independent recomputation for the plain Poisson cases
        if example == "ex1":
            g = fd.Grid1D(c.n_h)
            u = fd.poisson1d_solution(g, c.f_guess)
            assert abs(rec.loss_history[0] - np.linalg.norm(obs["u_true"] - u)) <= 1e-12
        if example == "ex2":
            assert abs(rec.loss_history[0] - np.linalg.norm(obs["u_true"])) <= 1e-12

    def test_ex9_outputs(self, tmp_path):
        c = cfg_for(tmp_path, "ex9", mesh=6, coarse_mesh=2, hidden=4, max_iter=3)
        rec = run_example(c)
        out = tmp_path / "out" / "ex9"
        for name in ("weights.json", "kappa.csv", "pretrain_loss_history.csv", "loss_history.csv"):
            assert (out / name).exists()
        assert len(rec.loss_history) == 4
        final = json.loads((out / "params_final.json").read_text())
        assert final["layers"] == [2, 4, 1] and final["kappa_max_error"] > 0

    def test_replay_is_bit_identical(self, tmp_path):
        c = cfg_for(tmp_path, "ex2", n_h=20, max_iter=30)
        run_example(c)
        first = (tmp_path / "out" / "ex2" / "loss_history.csv").read_bytes()
        run_example(c)
        assert (tmp_path / "out" / "ex2" / "loss_history.csv").read_bytes() == first


class TestCli:
    def test_run(self, tmp_path, capsys):
        code = cli.main(["run", "ex1", "--set", f"obs_dir={tmp_path / 'obs'}", "--out", str(tmp_path / "r")])
        assert code == 0
        assert '"stop_reason": "tol"' in capsys.readouterr().out

    def test_config_error_exit_code(self, capsys):
        assert cli.main(["run", "ex1", "--set", "lr=-1"]) == 2
        assert "lr" in capsys.readouterr().err
        assert cli.main(["run", "nope"]) == 2

    def test_solver_failure_exit_code(self, tmp_path, monkeypatch, capsys):
        from adjoint_pde.experiments import examples

        def singular(*args, **kw):
            raise SingularMatrixError(3)

        monkeypatch.setattr(examples.ad, "linear_solve_node", singular)
        code = cli.main(["run", "ex2", "--set", "n_h=8", "--set", f"obs_dir={tmp_path / 'obs'}",
                         "--out", str(tmp_path / "r")])
        assert code == 3
        assert "pivot 3" in capsys.readouterr().err
        # the partial record is still written
        assert json.loads((tmp_path / "r" / "summary.json").read_text())["stop_reason"] == "failure"

    def test_error_outside_loop_exit_code(self, monkeypatch, capsys):
        def boom(cfg):
            raise NewtonError("no convergence", [1.0, 2.0])

        monkeypatch.setattr(cli, "run_example", boom)
        assert cli.main(["run", "ex6"]) == 3
        assert "no convergence" in capsys.readouterr().err

    def test_observe_and_gradcheck(self, tmp_path, capsys):
        assert cli.main(["observe", "ex2", "--set", f"obs_dir={tmp_path / 'obs'}"]) == 0
        assert (tmp_path / "obs" / "ex2" / "meta.json").exists()
        assert cli.main(["gradcheck", "ex1"]) == 0
        assert "ok" in capsys.readouterr().out

    def test_console_script(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "adjoint_pde.experiments.cli", "run", "ex1",
                              "--set", "max_iter=1", "--set", f"obs_dir={tmp_path / 'obs'}",
                              "--out", str(tmp_path / "r")], capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
