"""Numeric core - dense tensors, tape autodiff, gradient checking."""

from .errors import (
    ConfigError,
    GenerationFailure,
    GestaltError,
    InvalidArgumentError,
    NotFoundError,
    OracleMismatchError,
    TrainingDivergedError,
    UninitializedError,
)
from .optim import Adam
from .tensor import Tape, Tensor, as_tensor, backward, current_tape, grad_check

__all__ = [
    "Adam",
    "ConfigError",
    "GenerationFailure",
    "GestaltError",
    "InvalidArgumentError",
    "NotFoundError",
    "OracleMismatchError",
    "Tape",
    "Tensor",
    "TrainingDivergedError",
    "UninitializedError",
    "as_tensor",
    "backward",
    "current_tape",
    "grad_check",
]
