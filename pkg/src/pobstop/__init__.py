"""Optimal stopping under partial observation: particle filtering plus regression Monte Carlo."""

from .model import (DiffusionModel, InitialLaw, LinearGaussianParams, ModelError, PathSample, SimGrid,
                    SteinSteinParams, linear_gaussian_model, stein_stein_model)
from .rng import StreamFactory

__version__ = "0.1.0"

__all__ = [
    "DiffusionModel", "InitialLaw", "LinearGaussianParams", "ModelError", "PathSample", "SimGrid",
    "SteinSteinParams", "StreamFactory", "linear_gaussian_model", "stein_stein_model",
]
