"""Relevant-evidence detection for multimodal misinformation: storage, retrieval, fusion, a numpy transformer, and training protocols."""

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    IoError,
    NumericalError,
    RedDotError,
    ShapeError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "FormatError",
    "IoError",
    "NumericalError",
    "RedDotError",
    "ShapeError",
    "StateError",
    "__version__",
]
