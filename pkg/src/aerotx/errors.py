"""Exception hierarchy shared by all aerotx modules."""


class AerotxError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(AerotxError):
    """Tensor extents do not match what an operation requires."""


class PartitionError(AerotxError):
    """An image cannot be tiled evenly by the requested block size."""


class ConfigError(AerotxError):
    """Invalid or inconsistent configuration values."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class IngestionError(AerotxError):
    """A dataset file could not be read."""


class ChannelError(AerotxError):
    """Invalid channel state (e.g. non-positive rate)."""


class NumericalError(AerotxError):
    """A numerical routine failed (rank deficiency, non-finite values)."""


class TrainingError(AerotxError):
    """Training diverged or received non-finite gradients."""
