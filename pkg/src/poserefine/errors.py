"""Exception types shared across the package."""


class PoseRefineError(Exception):
    """Base class for all package errors."""


class ShapeError(PoseRefineError):
    """An operation's shape contract was violated."""


class ConfigError(PoseRefineError):
    """Invalid, unknown, or inconsistent configuration."""


class DataError(PoseRefineError):
    """Malformed dataset, annotation file, or serialized artifact."""


class CheckpointError(DataError):
    """Corrupt, truncated, or incompatible checkpoint file."""


class NumericError(PoseRefineError):
    """A computation produced non-finite values.

    Carries an optional diagnostic snapshot (iteration index, recent
    losses, ...) for post-mortem inspection.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = dict(snapshot) if snapshot else {}
