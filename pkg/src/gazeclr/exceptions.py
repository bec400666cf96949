"""Exception hierarchy.

The CLI maps these onto exit codes: ConfigError -> 3, DataError (and
subclasses) -> 4, DivergenceError -> 5.
"""


class GazeclrError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GazeclrError):
    """Invalid or inconsistent configuration; message names the offending key."""


class DataError(GazeclrError):
    """Invalid input data (manifest, labels, geometry metadata)."""


class InvariantViolationError(DataError):
    """A value failed its type invariant (e.g. a non-rotation 3x3 matrix)."""


class InvalidDirectionError(DataError):
    """A gaze direction is unusable (zero or non-finite vector)."""


class DegeneratePoleError(InvalidDirectionError):
    """Yaw is undefined because the direction points at the +/-y pole."""


class IncompleteGroupError(DataError):
    """A (participant, timestamp) group is missing one or more views."""


class InsufficientViewsError(DataError):
    """An operation needs more views than the sample provides."""


class MissingViewError(DataError):
    """A batch lacks embeddings or rotations for a configured view."""


class MissingLabelError(DataError):
    """A supervised operation was given unlabeled data."""


class ShapeError(GazeclrError, ValueError):
    """Array arguments disagree in shape."""


class EmptyBatchError(ShapeError):
    """A batched operation received zero rows."""


class InvalidEmbeddingError(GazeclrError, ValueError):
    """An embedding row is zero or non-finite where a direction is required."""


class DivergenceError(GazeclrError):
    """Training loss became non-finite or exceeded the divergence guard."""

    def __init__(self, message, step=None, loss=None):
        super().__init__(message)
        self.step = step
        self.loss = loss


class CheckpointError(GazeclrError):
    """Base class for checkpoint persistence failures."""


class CheckpointIntegrityError(CheckpointError):
    """Weights blob is corrupt or does not match its sidecar digest."""


class IncompatibleCheckpointError(CheckpointError):
    """Checkpoint format version or config snapshot does not match."""
