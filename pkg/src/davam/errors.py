"""Exception hierarchy shared across the package."""


class DavamError(Exception):
    """Base class for every error raised by this package."""


class ContractError(DavamError, ValueError):
    """Shapes, ranges or call preconditions were violated."""


class NumericDomainError(DavamError, FloatingPointError):
    """Input outside the numeric domain of an operation (NaN, inf, sigma <= 0)."""


class DeterminismError(DavamError):
    """Two evaluations of a supposedly deterministic function disagreed."""


class IngestionError(DavamError):
    """Corpus could not be read or was empty."""


class ConfigError(DavamError, ValueError):
    """Invalid configuration value or incompatible model kind."""


class StateError(DavamError):
    """Operation requires a training stage that has not been run."""


class NumericAbort(DavamError):
    """Training produced a non-finite loss."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class CheckpointError(DavamError):
    """Base class for checkpoint loading failures."""


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    pass


class ModelKindError(CheckpointError, ConfigError):
    pass
