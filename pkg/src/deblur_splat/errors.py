class InvalidInputError(ValueError):
    """Raised when an operation receives non-finite or out-of-domain input."""


class DegenerateCovarianceError(ValueError):
    """Raised when a 2D covariance cannot be inverted."""


class ContractViolation(RuntimeError):
    """Raised when callers break a pairing contract (shapes, stale caches)."""


class LoadError(RuntimeError):
    """Raised when a dataset, checkpoint or config file cannot be read."""
