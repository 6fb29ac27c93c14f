"""Exception types shared across the package."""


class NsvolError(Exception):
    """Base class for all package-specific errors."""


class SchemeError(NsvolError, ValueError):
    """Invalid observation-time grid or grid parameters."""


class ParameterOutOfDomainError(NsvolError, ValueError):
    """A parameter vector lies outside the closed parameter box."""


class SimulationError(NsvolError, RuntimeError):
    """Coefficient functions returned non-finite values during simulation.

    Carries the time and state at which the failure occurred.
    """

    def __init__(self, message, t=None, x=None):
        super().__init__(message)
        self.t = t
        self.x = x


class NotPositiveDefiniteError(NsvolError, ValueError):
    """A covariance factorization failed.

    ``pivot`` is the (0-based) index of the offending leading minor when the
    backend reports one, else ``None``.  Indefiniteness is never repaired by
    jitter: it signals a modelling bug, not a numerical nuisance.
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class EstimationError(NsvolError, RuntimeError):
    """No usable likelihood evaluation was possible during estimation."""


class CoverageError(NsvolError, ValueError):
    """Requested correlation values exceed the valid resolvent radius."""
