"""Multi-view contrastive representation learning for gaze estimation."""

__version__ = "0.1.0"

from .exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    GazeclrError,
    InvalidDirectionError,
    InvariantViolationError,
    ShapeError,
)
from .geometry import (
    GazeDirection,
    RotationMatrix,
    angular_error_deg,
    effective_rotation,
    pitch_yaw_to_vector,
    vector_to_pitch_yaw,
)

__all__ = [
    "__version__",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DivergenceError",
    "GazeclrError",
    "GazeDirection",
    "InvalidDirectionError",
    "InvariantViolationError",
    "RotationMatrix",
    "ShapeError",
    "angular_error_deg",
    "effective_rotation",
    "pitch_yaw_to_vector",
    "vector_to_pitch_yaw",
]
