"""Evolved metrics of rough surface metrics from heat kernels and the continuity equation."""

__version__ = "0.1.0"

from .errors import (InvalidMetricError, MeshParseError, MeshTopologyError,  # noqa: F401
                     ResourceLimitError, RoughFlowError, SingularVertexError, SolverError)
