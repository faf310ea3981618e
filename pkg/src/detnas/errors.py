class DetNASError(Exception):
    """Base class for every error raised by detnas."""


class InputError(DetNASError, ValueError):
    """An argument has the wrong shape, length or provenance."""


class ConfigError(DetNASError, ValueError):
    """A configuration or geometry cannot be realised."""
