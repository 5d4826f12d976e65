"""Stochastic kinematic priors and car-following blending for trajectory forecasting."""

from . import autodiff, cfm, core, oracle, propagation
from .core import AgentProfile, Formulation, Gaussian1D, Gaussian2D, KinematicDist, MixtureComponent
from .errors import KinpriorError

__version__ = "0.1.0"

__all__ = [
    "AgentProfile", "Formulation", "Gaussian1D", "Gaussian2D", "KinematicDist", "KinpriorError",
    "MixtureComponent", "autodiff", "cfm", "core", "oracle", "propagation",
]
