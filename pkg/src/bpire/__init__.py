"""Branching processes with immigration in a random environment.

Exact quenched laws by generating-function composition, annealed estimates
by conditional Monte Carlo over environments, and the experiments that
check decay rates, limit laws and renewal counts against them.
"""

from .env_model import (
    EnvAtom,
    EnvironmentModel,
    EnvPath,
    Finite,
    InvalidSpecError,
    LinearFractional,
    PointMass,
    Poisson,
    sample_env,
    validate_assumptions,
)
from .pgf_engine import annealed_prob, quenched_eval, quenched_law_dft, quenched_law_series

__version__ = "0.1.0"

__all__ = [
    "EnvAtom",
    "EnvironmentModel",
    "EnvPath",
    "Finite",
    "InvalidSpecError",
    "LinearFractional",
    "PointMass",
    "Poisson",
    "annealed_prob",
    "quenched_eval",
    "quenched_law_dft",
    "quenched_law_series",
    "sample_env",
    "validate_assumptions",
]
