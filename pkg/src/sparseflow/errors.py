"""Exception types shared across the package."""


class SparseflowError(Exception):
    """Base class for errors raised by this package."""


class ShapeMismatch(SparseflowError):
    """Layer shapes do not chain, or an input does not fit a layer.

    Carries the offending layer index in `layer` when known.
    """

    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class NonFiniteInput(SparseflowError):
    """A forward pass received NaN or infinite input."""


class TapeConsumed(SparseflowError):
    """backward() was called twice on the same tape."""


class CheckpointError(SparseflowError):
    """Checkpoint file is corrupt, has the wrong version, or does not match."""


class SparsityError(SparseflowError):
    """A sparsity distribution cannot be realized."""


class DataFormatError(SparseflowError):
    """A dataset file has a bad magic number, is truncated, or is inconsistent."""


class TrainingDiverged(SparseflowError):
    """Loss became NaN; a diagnostic snapshot was written if possible."""

    def __init__(self, message, snapshot=None):
        self.snapshot = snapshot
        super().__init__(message)


class ConfigError(SparseflowError):
    """Invalid configuration (CLI exit code 1)."""
