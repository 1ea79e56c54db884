"""Exception hierarchy shared by every module of the package."""


class NASError(Exception):
    """Base class for all errors raised by oneshot_nas."""


class ShapeError(NASError, ValueError):
    """Tensor or parameter shapes do not fit the layer they are fed to."""


class NumericError(NASError, FloatingPointError):
    """A non-finite value appeared (input, activation or loss)."""


class UsageError(NASError, RuntimeError):
    """An API was called out of order or with an unsupported argument."""


class DataError(NASError, ValueError):
    """Labels or datasets are inconsistent with the model."""


class ConstraintError(NASError, ValueError):
    """No architecture satisfies the requested resource budget."""


class GenotypeParseError(NASError, ValueError):
    """A genotype string could not be decoded."""

    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class StageError(NASError, RuntimeError):
    """A weight store is not at the pipeline stage an operation requires."""


class CheckpointError(NASError, IOError):
    """Base class for checkpoint loading failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointHashError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass
