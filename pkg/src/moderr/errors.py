"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid model/experiment configuration (never raised mid-run)."""


class DomainError(ValueError):
    """Numerically invalid input, e.g. non-finite state components."""


class IntegrationBlowup(RuntimeError):
    """An integration step produced a non-finite state."""

    def __init__(self, time, message=None):
        self.time = time
        super().__init__(message or f"integration blew up at t={time:g}")


class DegenerateEnsembleError(RuntimeError):
    """Ensemble too small or fully collapsed for an analysis update."""


class NumericalError(RuntimeError):
    """A linear solve failed; carries the offending condition number."""

    def __init__(self, message, cond=None):
        self.cond = cond
        super().__init__(message if cond is None else f"{message} (cond={cond:.3e})")


class FilterDivergence(RuntimeError):
    """A filter's error exceeded the divergence threshold persistently."""
