"""Exception types shared across the package."""


class Dad4tsError(Exception):
    """Base class for all package errors."""


class IngestionError(Dad4tsError):
    """Raised when a series file cannot be parsed."""


class DegenerateSeriesError(Dad4tsError):
    """Raised when a series has zero variance on the training split."""


class ConfigurationError(Dad4tsError):
    """Raised for invalid or incomplete experiment configuration."""


class ContractError(Dad4tsError):
    """Raised when a caller violates an operation precondition."""


class BatchTooSmallError(ContractError):
    """Raised when a mini-batch is too small for a per-batch PCA fit."""


class EmptyStreamError(ContractError):
    """Raised when a split cannot produce a single window."""


class RegistryError(ConfigurationError):
    """Raised when a name is looked up in a registry that does not hold it."""


class DivergenceError(Dad4tsError):
    """Raised when an ODE trajectory leaves the finite guard region.

    Carries the grid step index at which divergence was detected.
    """

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step
