"""Experiment configuration: per-example defaults, a flat ``key = value`` file, overrides."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, PositiveFloat, PositiveInt, ValidationError, field_validator

from ..errors import ConfigError

EXAMPLE_ALIASES = {
    "ex1": "ex1", "ex1_poisson_scalar_force": "ex1",
    "ex2": "ex2", "ex2_poisson_vector_force": "ex2",
    "ex3": "ex3", "ex3_heat_spacetime": "ex3",
    "ex4": "ex4", "ex4_heat_timestepping": "ex4",
    "ex5": "ex5", "ex5_thermal_fin": "ex5",
    "ex6": "ex6", "ex6_nonlinear_heat": "ex6",
    "ex9": "ex9", "ex9_poisson_nn": "ex9",
}

MU_TRUE = (0.1, 8.37317, 6.57228, 0.466517, 1.88354, 0.01)
MU_REF = (1.0, 1.0, 1.0, 1.0, 1.0, 0.1)

DEFAULTS: dict[str, dict] = {
    "ex1": dict(n_h=50, f_true=-1.0, f_guess=2.0, optimizer="rprop", lr=0.1, alpha=0.0,
                max_iter=100, tol=1e-6),
    "ex2": dict(n_h=50, optimizer="rprop", lr=0.1, alpha=0.099, max_iter=1000, tol=1e-6),
    "ex3": dict(n_h=150, n_k=50, T=1.0, optimizer="rprop", lr=0.1, alpha=0.01,
                max_iter=1000, tol=1e-6),
    "ex4": dict(n_h=150, n_k=50, T=1.0, optimizer="rprop", lr=0.1, alpha=0.1,
                max_iter=500, tol=1e-6),
    "ex5": dict(mesh=16, optimizer="rprop", lr=0.01, alpha=0.1, max_iter=100, tol=1e-6,
                mu_true=MU_TRUE, mu_ref=MU_REF, mu_guess=(0.5,) * 6),
    "ex6": dict(mesh=10, n_k=100, T=1.0, optimizer="rprop", lr=0.1, alpha=0.1,
                max_iter=100, tol=1e-6),
    "ex9": dict(mesh=40, coarse_mesh=4, mode="mixed", hidden=20, optimizer="adam", lr=1e-2,
                max_iter=200, tol=0.0, kappa_min=1e-3),
}


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    example: Literal["ex1", "ex2", "ex3", "ex4", "ex5", "ex6", "ex9"]
    optimizer: Literal["rprop", "adam"] = "rprop"
    lr: PositiveFloat = 0.1
    alpha: float = 0.0
    max_iter: int = 100
    tol: float = 1e-6
    seed: int = 0
    snapshot_stride: int = 0
    out_dir: Optional[str] = None
    obs_dir: str = "observations"
    noise_sigma: float = 0.0
    noise_seed: int = 0

    # finite-difference grids
    n_h: Optional[int] = None
    n_k: Optional[int] = None
    T: Optional[PositiveFloat] = None
    # ex1
    f_true: Optional[float] = None
    f_guess: Optional[float] = None
    # FEM meshes (cells per direction, or per unit length for the fin)
    mesh: Optional[PositiveInt] = None
    coarse_mesh: Optional[PositiveInt] = None
    # ex5
    mu_true: Optional[tuple[float, ...]] = None
    mu_ref: Optional[tuple[float, ...]] = None
    mu_guess: Optional[tuple[float, ...]] = None
    # ex9
    mode: Optional[Literal["data", "physics", "mixed"]] = None
    hidden: Optional[PositiveInt] = None
    iters_stage1: Optional[PositiveInt] = None
    iters_stage2: Optional[PositiveInt] = None
    kappa_min: Optional[PositiveFloat] = None

    @field_validator("alpha", "tol", "noise_sigma")
    @classmethod
    def _non_negative(cls, v, info):
        if v < 0:
            raise ValueError(f"{info.field_name} must be >= 0")
        return v

    @field_validator("max_iter", "snapshot_stride")
    @classmethod
    def _non_negative_int(cls, v, info):
        if v < 0:
            raise ValueError(f"{info.field_name} must be >= 0")
        return v

    @field_validator("n_h")
    @classmethod
    def _grid(cls, v):
        if v is not None and v < 2:
            raise ValueError("n_h must be >= 2")
        return v

    @field_validator("n_k")
    @classmethod
    def _steps(cls, v):
        if v is not None and v < 1:
            raise ValueError("n_k must be >= 1")
        return v

    @field_validator("mu_true", "mu_ref", "mu_guess")
    @classmethod
    def _mu(cls, v):
        if v is not None and (len(v) != 6 or min(v) <= 0):
            raise ValueError("mu vectors need six positive entries")
        return v

    def to_dict(self) -> dict:
        return {k: v for k, v in self.model_dump().items() if v is not None}


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [parse_value(t) for t in text.split(",")]
    return text


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; values are JSON or bare words."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def load_config(example: str, path=None, overrides=None, out_dir=None) -> ExperimentConfig:
    """Merge defaults, the config file and ``--set`` overrides, then validate."""
    ex = EXAMPLE_ALIASES.get(example)
    if ex is None:
        raise ConfigError(f"unknown example {example!r}; choose from {sorted(set(EXAMPLE_ALIASES.values()))}")
    values = {"example": ex, **DEFAULTS[ex]}
    if path is not None:
        try:
            file_values = parse_config_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        file_ex = file_values.pop("example", ex)
        if EXAMPLE_ALIASES.get(str(file_ex)) != ex:
            raise ConfigError(f"config file is for {file_ex!r}, not {ex!r}")
        values.update(file_values)
    values.update(overrides or {})
    if out_dir is not None:
        values["out_dir"] = str(out_dir)
    return validate(values)


def validate(values: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig(**values)
    except ValidationError as exc:
        lines = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines)) from None
