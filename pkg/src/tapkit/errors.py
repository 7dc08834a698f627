"""Exception hierarchy shared by every tapkit module."""


class TapkitError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(TapkitError):
    """Operand shapes are incompatible."""


class InputError(TapkitError):
    """An argument violates an operation's precondition."""


class ConfigError(TapkitError):
    """A configuration object is internally inconsistent."""


class ValidationError(TapkitError):
    """Loaded data violates its schema or an invariant."""


class ParseError(TapkitError):
    """A text input could not be parsed."""


class FormatError(TapkitError):
    """A binary container is malformed or truncated."""


class NumericError(TapkitError):
    """A non-finite value appeared where finite values are required."""
