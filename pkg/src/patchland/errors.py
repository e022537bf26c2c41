"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PatchlandError(Exception):
    exit_code = 1


class ConfigError(PatchlandError, ValueError):
    """Invalid configuration or usage."""

    exit_code = 1


class DataError(PatchlandError, ValueError):
    """Malformed or incompatible input data."""

    exit_code = 2


class NumericalError(PatchlandError, ArithmeticError):
    """Training produced non-finite values."""

    exit_code = 3
