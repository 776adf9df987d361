"""Steady states of M/Ph/n+M queues and their piecewise OU diffusion limits."""
from .mphn_ctmc import ScaledLaw, StationaryPmf, SystemParams, scaled_system_law, solve, staffing
from .phase_type import PhaseType, PhaseTypeError, derive, erlang2, exponential, hyperexp2
from .piecewise_ou import DiffusionModel, SdeConfig, exact_1d

__version__ = "0.1.0"

__all__ = [
    "DiffusionModel",
    "PhaseType",
    "PhaseTypeError",
    "ScaledLaw",
    "SdeConfig",
    "StationaryPmf",
    "SystemParams",
    "derive",
    "erlang2",
    "exact_1d",
    "exponential",
    "hyperexp2",
    "scaled_system_law",
    "solve",
    "staffing",
]
