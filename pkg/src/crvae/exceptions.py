class ConfigurationError(ValueError):
    """Model, data and configuration disagree (shapes, latent size, keys)."""


class DataFormatError(ValueError):
    """A dataset file does not match its declared binary layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, truncated or of another version."""


class TrainingDivergedError(FloatingPointError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message, epoch=None, checkpoint_path=None):
        super().__init__(message)
        self.epoch = epoch
        self.checkpoint_path = checkpoint_path
