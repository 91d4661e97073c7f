"""Stochastic flows of kernels: simulation, oracles and acceptance experiments."""

from __future__ import annotations

from .core import (CoalescencePartition, DiscreteMeasure, FiniteKernel, FlowRealization,
                   TimeGrid, compose_flow, pushforward)
from .stats import ExperimentReport

__version__ = "0.1.0"

__all__ = [
    "CoalescencePartition",
    "DiscreteMeasure",
    "ExperimentReport",
    "FiniteKernel",
    "FlowRealization",
    "TimeGrid",
    "compose_flow",
    "pushforward",
    "__version__",
]
