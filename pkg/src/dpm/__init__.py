"""Deep-learning PDE models: neural closures trained through the discrete adjoint of an LES solver."""

from .config import ExperimentConfig, load_config, parse_config
from .grid import GridSpec
from .network import NeuralClosure, param_count
from .solver import FluidState, SolverConfig, step

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "FluidState",
    "GridSpec",
    "NeuralClosure",
    "SolverConfig",
    "load_config",
    "param_count",
    "parse_config",
    "step",
]
