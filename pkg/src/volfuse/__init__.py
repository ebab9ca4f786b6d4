"""volfuse: rank-pooling fusion + CBAM classification for 3D volumes.

The numerics core (Tensor/ops/gradcheck/Rng) is self-contained and checked
against finite differences and naive-loop oracles; everything downstream
(fusion, attention, models, training, metrics, data, CLI) builds on it.
"""

from .errors import (
    CheckpointError,
    CheckpointHashError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    ConfigError,
    DataFormatError,
    DatasetError,
    NonFiniteError,
    ShapeError,
    VolfuseError,
)
from .gradcheck import grad_check
from .rng import Rng, derive_seed
from .tensor import Parameter, Tensor

__all__ = [
    "Tensor",
    "Parameter",
    "Rng",
    "derive_seed",
    "grad_check",
    "VolfuseError",
    "ShapeError",
    "NonFiniteError",
    "ConfigError",
    "DataFormatError",
    "DatasetError",
    "CheckpointError",
    "CheckpointHashError",
    "CheckpointShapeError",
    "CheckpointTruncatedError",
]

__version__ = "0.1.0"
