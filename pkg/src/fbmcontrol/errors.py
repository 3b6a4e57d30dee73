"""Exception hierarchy shared by all modules."""


class FbmControlError(Exception):
    """Base class for all package errors."""


class ParameterError(FbmControlError, ValueError):
    """A parameter gate rejected its input (Hurst range, discount gate, config)."""


class ContractError(FbmControlError, ValueError):
    """A caller broke a precondition (mismatched grids, empty ensembles, ...)."""


class SingularPointError(FbmControlError, ValueError):
    """Kernel evaluated on its diagonal singularity."""


class NumericalError(FbmControlError, ArithmeticError):
    """Base for numerical non-convergence."""


class FactorizationError(NumericalError):
    """Covariance factorization failed even after jitter."""


class AccuracyError(NumericalError):
    """Adaptive quadrature did not reach its tolerance."""


class DriverError(NumericalError):
    """Per-step Picard iteration failed to contract."""


class ConfigurationError(FbmControlError, ValueError):
    """The problem is well formed but cannot be solved as configured."""


class AdmissibilityError(NumericalError):
    """State process exploded under the evaluated control."""
