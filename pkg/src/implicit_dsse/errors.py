"""Exception hierarchy shared across the package."""


class DsseError(Exception):
    """Base class for all package errors."""


class CaseParseError(DsseError):
    """A case file could not be read or does not follow the case schema."""


class NetworkValidationError(DsseError):
    """The network topology violates a structural invariant."""


class SingularBranchError(DsseError):
    """A branch has zero series impedance."""


class ConfigurationError(DsseError):
    """Invalid user-facing configuration (scenario, sigma, hyperparameters)."""


class ObservabilityError(DsseError):
    """The gain matrix J^T W J is rank deficient."""


class DivergenceError(DsseError):
    """An iterative solver produced non-finite iterates or failed to converge."""

    def __init__(self, message, last_norm=None):
        super().__init__(message)
        self.last_norm = last_norm


class ContractViolation(DsseError):
    """An internal usage contract was broken (stale cache, mixed reports...)."""


class TrainingAborted(DsseError):
    """Training hit a non-finite loss/gradient or too many skipped samples."""
