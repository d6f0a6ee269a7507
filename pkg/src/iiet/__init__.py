"""Iterative implicit Euler transformer laboratory.

Residual connections as ODE integrators (Euler, multistep, Runge-Kutta,
predictor-corrector, iterative implicit Euler) inside a micro byte-level
language model, with influence analysis and influence-aware distillation.
"""

from .integrators import DivergenceError, SolverSpec
from .model import IterationSchedule, ModelConfig, forward, init_model
from .tensor import ConfigurationError, NonFiniteError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DivergenceError",
    "IterationSchedule",
    "ModelConfig",
    "NonFiniteError",
    "ShapeError",
    "SolverSpec",
    "forward",
    "init_model",
]
