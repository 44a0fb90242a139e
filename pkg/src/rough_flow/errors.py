"""Exception hierarchy shared by all modules."""


class RoughFlowError(Exception):
    """Base class for errors raised by this package."""


class MeshParseError(RoughFlowError, ValueError):
    """A mesh file could not be parsed. ``line`` is 1-based, or None."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MeshTopologyError(RoughFlowError, ValueError):
    """The face list does not describe a closed, oriented, connected surface.

    ``line`` is set when the error was raised while loading a file.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidMetricError(RoughFlowError, ValueError):
    """Per-face lengths violate the triangle inequality or positivity."""


class ResourceLimitError(RoughFlowError, RuntimeError):
    """A size cap was exceeded."""


class SingularVertexError(RoughFlowError, ValueError):
    """An operation that needs a tangent frame was asked about a singular vertex."""


class SolverError(RoughFlowError, RuntimeError):
    """An iterative solve failed; ``history`` holds the relative residuals."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
