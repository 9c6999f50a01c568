"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``ConfigError`` -> 1, ``DataError`` -> 2,
``NumericError`` -> 3.
"""


class KgqaError(Exception):
    """Base class for all package errors."""


class ConfigError(KgqaError, ValueError):
    """Invalid configuration or mismatched model/data settings."""


class DataError(KgqaError, ValueError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class ReferentialError(DataError):
    """A record references an identifier that was never declared."""


class ShapeError(KgqaError, ValueError):
    """Tensor or parameter shapes do not line up."""


class NumericError(KgqaError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class NoCandidateError(KgqaError):
    """Every candidate slot is masked, so no entity can be selected."""
