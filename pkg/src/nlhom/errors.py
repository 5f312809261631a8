"""Exception types shared across the package."""


class NlhomError(Exception):
    """Base class for all package errors."""


class InputError(NlhomError):
    """Invalid argument to an operation (non-finite input, bad scale, ...)."""


class ConfigError(NlhomError):
    """Invalid configuration: schema, commensurability, or expression issues."""


class AssumptionError(NlhomError):
    """A structural hypothesis on kernels/coefficients is violated (H1-H4)."""


class ConvergenceError(NlhomError):
    """An iterative solver hit its cap; carries the residual history."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class AssemblyError(NlhomError):
    """The assembled operator is inconsistent (e.g. non-positive curvature)."""


class DomainError(NlhomError):
    """A point argument lies outside the admissible set (e.g. (s,A) not tangent)."""
