"""Deterministic simulator for semantics-guided feature mixup in long-tail federated learning."""

from .errors import (
    ConfigError,
    DataError,
    DegenerateInput,
    DimensionError,
    FedSMError,
    NumericsError,
    ParseError,
    ProtocolError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateInput",
    "DimensionError",
    "FedSMError",
    "NumericsError",
    "ParseError",
    "ProtocolError",
]
