"""Exception types shared across the package.

The CLI maps ValidationError (and subclasses) to exit code 2 and
NumericalError to exit code 3; library code raises these directly.
"""


class ValidationError(ValueError):
    """Invalid configuration, file content, or parameter values."""


class ConfigurationError(ValidationError):
    """Structurally valid input that cannot be turned into a runnable setup."""


class NumericalError(RuntimeError):
    """A numerical routine failed (overflow, factorization breakdown, ...)."""


class CalmWindError(ValueError):
    """Horizontal wind too weak to define a plume axis."""
