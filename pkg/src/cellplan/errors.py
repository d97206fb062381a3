"""Exception types raised by cellplan."""


class CellplanError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(CellplanError, ValueError):
    pass


class ConfigError(CellplanError, ValueError):
    pass


class InstanceParseError(CellplanError, ValueError):
    """Malformed instance or solution file. ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class InstanceValidationError(CellplanError, ValueError):
    pass


class DeploymentError(CellplanError, ValueError):
    """A deployment violates the structural rules (one per site, macros open)."""


class OracleLimitError(CellplanError):
    """The brute-force oracle refused an instance that is too large."""

    def __init__(self, message, n_deployments, n_users):
        super().__init__(message)
        self.n_deployments = n_deployments
        self.n_users = n_users
