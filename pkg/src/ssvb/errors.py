"""Exception types shared across the package."""


class SsvbError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(SsvbError, ValueError):
    """Invalid configuration: bad flags, malformed files, impossible requests."""


class DomainError(SsvbError, ValueError):
    """Evaluation outside the supported domain (e.g. beyond the spline knots)."""


class NumericFailure(SsvbError, RuntimeError):
    """Non-finite values or an irrecoverably failed numeric procedure."""
