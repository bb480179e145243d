"""Exception hierarchy shared by all modules."""


class AarmrError(Exception):
    """Base class for errors raised by this package."""


class ParameterError(AarmrError, ValueError):
    """An argument is outside its admissible range or has the wrong shape."""


class ConfigurationError(AarmrError, ValueError):
    """A problem or run configuration is inconsistent."""


class SolverError(AarmrError, RuntimeError):
    """A linear solve could not be carried out."""


class DegenerateBasisError(SolverError):
    """A reduced basis produced a (numerically) singular projected matrix."""


class OptimizationError(AarmrError, RuntimeError):
    """The design update failed; carries the records produced so far."""

    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = list(records or [])
