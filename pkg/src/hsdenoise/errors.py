"""Exception hierarchy shared across the toolkit."""


class HsdError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(HsdError, ValueError):
    """Operand shapes are inconsistent with the requested operation."""


class DomainError(HsdError, ValueError):
    """A value lies outside the operation's admissible domain."""


class NonFiniteError(HsdError, ArithmeticError):
    """A NaN or Inf appeared while debug checks were enabled."""


class TapeStateError(HsdError, RuntimeError):
    """A tape was used in an invalid state (e.g. backward ran twice)."""


class FormatError(HsdError, ValueError):
    """A serialized artifact does not follow its documented layout."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(FormatError):
    """File ends before its declared payload is complete."""


class UnknownDtypeError(FormatError):
    """File declares a dtype code this reader does not know."""


class UnsupportedFormatError(FormatError):
    """Raster declares an interleave or sample type outside the supported set."""


class CheckpointError(FormatError):
    """Checkpoint is unreadable or does not match the target model."""


class ConfigError(HsdError, ValueError):
    """Experiment configuration failed validation; message carries the key path."""


class DivergenceError(HsdError, ArithmeticError):
    """Training loss became non-finite."""


class InputTooSmallError(HsdError, ValueError):
    """Input image is below the minimum size the operation supports."""
