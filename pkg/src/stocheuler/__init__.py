"""2D Euler with linear multiplicative noise, simulated through the OU conjugation."""

from .errors import BlowupError, DataError, ParameterError, RangeError
from .field import Grid, ScalarField, VectorField, norms, poisson_solve
from .noise import OUPath, WienerPath, ou_from_wiener, ou_shift, sample_ou, sample_wiener
from .dynamics import ForcingSpec, SolverConfig, VorticityState, evolve, evolve_ensemble
from .bounds import yudovich_factor

__all__ = [
    "BlowupError", "DataError", "ParameterError", "RangeError",
    "Grid", "ScalarField", "VectorField", "norms", "poisson_solve",
    "OUPath", "WienerPath", "ou_from_wiener", "ou_shift", "sample_ou", "sample_wiener",
    "ForcingSpec", "SolverConfig", "VorticityState", "evolve", "evolve_ensemble",
    "yudovich_factor",
]
