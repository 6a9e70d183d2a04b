"""Multi-branch convolutional face embeddings with identification and
verification supervision, Joint Bayesian scoring, and activation analyses."""
from ._backend import backend_name
from .errors import (ArgumentError, CheckpointError, ConfigError, Did2Error, IngestionError,
                     NumericError, ProtocolError, SamplingError, ShapeError)

__version__ = "0.1.0"

__all__ = [
    "backend_name",
    "ArgumentError",
    "CheckpointError",
    "ConfigError",
    "Did2Error",
    "IngestionError",
    "NumericError",
    "ProtocolError",
    "SamplingError",
    "ShapeError",
]
