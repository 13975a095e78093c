"""Staggered-grid Maxwell solver with weighted-estimate and coefficient-stability diagnostics."""

__version__ = "0.1.0"

from .grid import Grid, ScalarField, VectorField  # noqa: E402,F401
from .media import CoefficientPair, check_admissible  # noqa: E402,F401
from .weights import CarlemanParams, InfeasibleParameters, select_parameters  # noqa: E402,F401
from .solver import NumericalFailure, run_forward, build_initial_data  # noqa: E402,F401
