"""Configured recovery experiments and their command-line entry point."""

from .config import ExperimentConfig, load_config
from .examples import generate_observations, run_example, run_gradcheck

__all__ = ["ExperimentConfig", "load_config", "generate_observations", "run_example", "run_gradcheck"]
