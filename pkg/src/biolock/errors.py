"""Exception types shared across the toolkit."""


class BiolockError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(BiolockError, ValueError):
    """Invalid parameter or configuration value."""


class DegenerateInputError(BiolockError, ValueError):
    """Input is structurally valid but degenerate (e.g. zero variance)."""


class NumericError(BiolockError, ArithmeticError):
    """Numerical failure such as integration divergence."""


class EnrollmentError(BiolockError, RuntimeError):
    """Key enrollment could not produce a usable key."""


class ProtocolError(BiolockError, RuntimeError):
    """Illegal protocol state transition or message."""
