"""Phase-field thrombus flow: coupled Navier-Stokes / Cahn-Hilliard / elastic transport solver."""
from .dynamics import SolverConfig, State, make_state, step, step_regularized
from .model import CoefficientParams, ModelParams, PotentialParams
from .ops import Grid2D

__all__ = ["CoefficientParams", "Grid2D", "ModelParams", "PotentialParams", "SolverConfig",
           "State", "make_state", "step", "step_regularized"]
__version__ = "0.1.0"
