"""Exception types shared across the estimation engine."""

from __future__ import annotations


class GLMMError(Exception):
    """Base class for all engine errors."""


class DomainError(GLMMError, ValueError):
    """Invalid response value or non-finite linear predictor."""


class ValidationError(GLMMError, ValueError):
    """Model or input data failed validation.

    ``diagnostics`` holds the machine-readable records that triggered it.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class NotPositiveDefiniteError(GLMMError, ValueError):
    def __init__(self, message, group=None):
        super().__init__(message)
        self.group = group


class TierRefusedError(GLMMError, ValueError):
    """Requested approximation tier cannot be used for this model."""


class NonConvergenceError(GLMMError, RuntimeError):
    """An iterative solve stopped before meeting its criterion.

    ``last`` carries the final iterate (a vector, a ModeResult or a
    FitResult depending on the raiser) so callers can inspect or resume.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last
