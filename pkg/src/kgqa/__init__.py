"""Simple-question answering over a knowledge graph with gated entity disambiguation."""

from .errors import ConfigError, DataError, KgqaError, NoCandidateError, NumericError, ParseError, ReferentialError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "KgqaError",
    "NoCandidateError",
    "NumericError",
    "ParseError",
    "ReferentialError",
    "ShapeError",
    "__version__",
]
