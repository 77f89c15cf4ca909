class KinaemaError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(KinaemaError, ValueError):
    pass


class ConfigError(KinaemaError, ValueError):
    pass


class InputError(KinaemaError, ValueError):
    pass


class DomainError(KinaemaError, ValueError):
    pass


class NumericError(KinaemaError, FloatingPointError):
    pass


class LoadError(KinaemaError, OSError):
    pass


class VersionMismatchError(LoadError):
    pass


class TruncatedFileError(LoadError):
    pass


class ChecksumError(LoadError):
    pass
