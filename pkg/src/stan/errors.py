"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so new error kinds should
subclass one of the four categories below rather than StanError directly.
"""


class StanError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(StanError):
    """Invalid configuration: bad schema, unknown keys, impossible shapes."""


class DataError(StanError):
    """Invalid dataset, manifest, or file contents."""


class NumericalError(StanError):
    """Non-finite values, failed gradient checks, numerical breakdown."""


class IoError(StanError):
    """Filesystem / serialization failures (bad magic, truncation, ...)."""


class ShapeError(ConfigError):
    """Operand shapes incompatible with the requested operation."""
