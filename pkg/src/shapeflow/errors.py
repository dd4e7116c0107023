"""Exception hierarchy shared across the package.

CLI exit codes: validation-type errors map to 2, numerical divergence to 3,
usage errors to 64 (see cli.main).
"""


class ShapeflowError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ShapeflowError):
    """Arguments violate an operation's preconditions."""


class ValidationError(ShapeflowError):
    """A data object violates its structural invariants."""


class MeshParseError(ShapeflowError):
    """Malformed mesh file."""

    def __init__(self, message, path=None, line=None):
        loc = f"{path}:{line}: " if path is not None and line is not None else ""
        super().__init__(f"{loc}{message}")
        self.path = path
        self.line = line


class DivergenceError(ShapeflowError):
    """Numerical integration or optimization produced non-finite state."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ConfigurationError(ShapeflowError):
    """A task is missing inputs it needs (e.g. scores for reparametrization)."""


class PairingError(ShapeflowError):
    """Predictions and ground truth could not be matched up in time."""


class InterpolationRangeError(ShapeflowError):
    """Query time falls outside a sampled trajectory's evaluable span."""
