"""
Exception types for ScaleDepth.
The CLI maps these to one-line diagnostics and exit codes.
"""


class ScaleDepthError(Exception):
    """Base class for all ScaleDepth failures."""


class DepthIOError(ScaleDepthError):
    """Reading or writing an image, depth map or point cloud failed."""


class InvalidDepthError(ScaleDepthError, ValueError):
    """A depth value violates the constraints of its map or policy."""


class ConfigError(ScaleDepthError, ValueError):
    """A configuration file or record is malformed or inconsistent."""


class CheckpointMismatchError(ScaleDepthError):
    """A checkpoint was produced by a different model configuration."""


class EmbeddingTableError(ScaleDepthError, ValueError):
    """A scene embedding table is malformed or cannot be used."""


class EmbeddingRejectionError(ScaleDepthError):
    """Pseudo embeddings could not satisfy the separation bound."""


class NonFiniteLossError(ScaleDepthError):
    """A training step produced a NaN or infinite loss."""


class TrainingDivergedError(ScaleDepthError):
    """Too many consecutive non-finite steps; the run was aborted."""


class UsageError(ScaleDepthError):
    """A command was invoked with inconsistent arguments."""
