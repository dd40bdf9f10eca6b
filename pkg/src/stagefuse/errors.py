"""Exceptions raised by stagefuse

Every error derives from a builtin exception so callers that only know
about ``ValueError`` or ``OSError`` still catch them.
"""


class InvalidInput(ValueError):
    """An argument has the wrong shape, range or content"""


class InvalidStats(InvalidInput):
    """Normalization statistics cannot be applied"""


class DecodeError(InvalidInput):
    """An image file could not be decoded"""


class InvalidConfig(ValueError):
    """A configuration value is out of its allowed range"""


class UndefinedMetric(ValueError):
    """A metric is mathematically undefined for the given input"""


class UnsupportedBackbone(TypeError):
    """A backbone lacks a capability the caller needs"""


class MissingCheckpoint(FileNotFoundError):
    """A checkpoint required for evaluation does not exist"""


class RunLocked(RuntimeError):
    """Another process owns the run directory"""


class CheckpointError(OSError):
    """Writing or reading a checkpoint failed

    ``last_durable`` is the path of the newest checkpoint known to be
    complete on disk, or ``None``.
    """

    def __init__(self, message, last_durable=None):
        super().__init__(message)
        self.last_durable = last_durable
