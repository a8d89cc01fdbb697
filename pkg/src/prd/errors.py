"""Exception hierarchy shared across the package."""


class PRDError(Exception):
    """Base class for all package errors."""


class DomainError(PRDError, ValueError):
    """An argument lies outside the domain of an operation."""


class NumericError(PRDError, ArithmeticError):
    """A computation produced (or would produce) a non-finite value."""


class StateError(PRDError, RuntimeError):
    """Bookkeeping between prototypes, snapshots and sessions is inconsistent."""


class ProtocolError(PRDError, ValueError):
    """A batch violates the two-view construction (e.g. an anchor without positives)."""


class ConfigError(PRDError, ValueError):
    """A configuration value is invalid."""


class TrainingAborted(PRDError, RuntimeError):
    """Raised when a training step produced a non-finite loss.

    ``diagnostics`` carries the step index, component losses and gradient norms.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
