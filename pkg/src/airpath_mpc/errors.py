"""Exception types shared across the package."""


class AirpathError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AirpathError, ValueError):
    """Malformed grids, tables or run configuration.

    ``path`` names the offending field (``"fb.N"``, ``"nodes[3].A"``) when known.
    """

    def __init__(self, message, path=None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class DomainError(AirpathError, ValueError):
    """Argument outside the admissible envelope of an operation."""


class DegenerateFlowError(DomainError):
    pass


class IdentificationError(AirpathError):
    """Local model identification failed (rank deficiency, instability)."""

    def __init__(self, message, node=None):
        self.node = node
        if node is not None:
            message = f"node {node}: {message}"
        super().__init__(message)


class StabilityError(IdentificationError):
    pass


class ConvergenceError(AirpathError):
    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)
