"""Exception types shared across the package."""


class RenderFlowError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(RenderFlowError, ValueError):
    """An argument violates a documented precondition."""


class CorruptFileError(RenderFlowError, IOError):
    """A sequence or checkpoint file is truncated or has a bad header."""


class UnsupportedConfigurationError(RenderFlowError):
    """The requested combination of model and options cannot run."""


class TrainingDivergedError(RenderFlowError, RuntimeError):
    """Training produced a non-finite loss."""


class ConfigError(RenderFlowError, ValueError):
    """A run configuration key is unknown, mistyped or violates an invariant.

    The offending dotted path is available as ``path``.
    """

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")
