"""Concept-based rationalization: K contiguous text concepts, a presence
selector, and a linear aggregation of per-concept predictions."""

from conrat.errors import (
    BoundsError,
    ConfigError,
    ConratError,
    DegenerateInputError,
    FormatError,
    ParameterError,
    TrainingDivergedError,
    VocabularyMismatchError,
)

__version__ = "0.1.0"

__all__ = [
    "BoundsError",
    "ConfigError",
    "ConratError",
    "DegenerateInputError",
    "FormatError",
    "ParameterError",
    "TrainingDivergedError",
    "VocabularyMismatchError",
]
