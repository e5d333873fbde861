"""Gradient-flow experiments on the unconstrained layer-peeled cross-entropy model."""

from .model import InvalidInputError, ParameterPoint, ProblemShape, loss, margins
from .geometry import make_etf, nc_metrics, nc_solution
from .dynamics import FlowConfig, run_flow
from .certify import certificate

__all__ = [
    "InvalidInputError",
    "ParameterPoint",
    "ProblemShape",
    "loss",
    "margins",
    "make_etf",
    "nc_metrics",
    "nc_solution",
    "FlowConfig",
    "run_flow",
    "certificate",
]
__version__ = "0.1.0"
