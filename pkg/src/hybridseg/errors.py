"""Exception hierarchy shared across the package."""


class HybridSegError(Exception):
    """Base class for all package errors."""


class DimensionError(HybridSegError, ValueError):
    pass


class ConfigError(HybridSegError, ValueError):
    pass


class UsageError(HybridSegError, ValueError):
    pass


class ParseError(HybridSegError, ValueError):
    pass


class UnsupportedFormatError(ParseError):
    pass


class IntegrityError(HybridSegError, IOError):
    pass


class LoadError(HybridSegError, ValueError):
    pass


class ResumeError(HybridSegError, RuntimeError):
    pass


class NonFiniteLossError(HybridSegError, FloatingPointError):
    pass
