"""Multi-negative Plackett-Luce preference optimization with SAE-guided negative selection."""

from mispdpo.errors import (
    ConfigError,
    DataError,
    DegenerateInputError,
    DimensionError,
    DivergenceError,
    DomainError,
    InsufficientDataError,
    MispError,
    NumericError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateInputError",
    "DimensionError",
    "DivergenceError",
    "DomainError",
    "InsufficientDataError",
    "MispError",
    "NumericError",
    "__version__",
]
