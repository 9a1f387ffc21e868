"""Simulation, closed forms and identity checks for positive strict local martingales."""

from slm.core import (DiagnosticsError, MCEstimate, PathBatch, RandomSource, TimeGrid,
                      grid_from_times, make_grid, mc_reduce)
from slm.sde import Family, ProcessModel

__all__ = [
    "DiagnosticsError",
    "Family",
    "MCEstimate",
    "PathBatch",
    "ProcessModel",
    "RandomSource",
    "TimeGrid",
    "grid_from_times",
    "make_grid",
    "mc_reduce",
]

__version__ = "0.1.0"
