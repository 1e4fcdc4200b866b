"""Cross-modal momentum contrast with active negative sampling.

Plain-numpy encoders, FIFO key dictionaries, gradient-embedding negative
selection, a synthetic paired-data generator with tunable mutual
information, and the experiment drivers built on top of them.
"""
from .errors import (
    AccError,
    CapacityError,
    ConfigParseError,
    DegenerateInputError,
    DivergenceError,
    FeatureDisabledError,
    InvalidArgumentError,
    ShapeError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "AccError",
    "CapacityError",
    "ConfigParseError",
    "DegenerateInputError",
    "DivergenceError",
    "FeatureDisabledError",
    "InvalidArgumentError",
    "ShapeError",
    "ValidationError",
    "__version__",
]
