"""Exception types shared across the pipeline."""


class RestainError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(RestainError):
    """A file on disk does not match the expected on-disk format."""


class ResolutionError(RestainError):
    """An image's resolution is incompatible with the requested operation."""


class PredictorError(RestainError):
    """A predictor violated its output contract or failed to run."""


class DependencyError(RestainError):
    """A pipeline stage was run before the stage it depends on."""


class ConfigError(RestainError):
    """Invalid pipeline configuration; message lists every offending key."""


class GenerationError(RestainError):
    """A synthetic slide specification cannot be realized."""
