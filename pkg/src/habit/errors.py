class HabitError(Exception):
    """Base class for all library errors."""


class ZeroRow(HabitError):
    """A row (or pooled vector) has numerically zero L2 norm."""


class DimensionMismatch(HabitError):
    """Operand shapes are incompatible."""


class DomainError(HabitError):
    """A scalar argument is outside its valid range."""


class DegenerateBatch(HabitError):
    """Batch too small for the requested operation."""


class LengthMismatch(HabitError):
    """Paired sequences have different lengths."""


class MissingTarget(HabitError):
    """A query's true target is absent from its candidate list."""


class ConfigError(HabitError):
    """Invalid configuration value."""


class FormatError(HabitError):
    """A file on disk is corrupt or not in the expected format."""
