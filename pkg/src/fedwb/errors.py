"""Shared exception types."""


class DimensionError(ValueError):
    """Operands have incompatible lengths or shapes."""


class DomainError(ValueError):
    """A value violates its domain invariants (e.g. not a probability vector)."""


class SizeLimitError(ValueError):
    """Instance exceeds the size limit of a small-instance oracle."""
