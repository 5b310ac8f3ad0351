"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes do not line up for the requested operation."""


class ValidationError(ValueError):
    """Input data or configuration violates a documented precondition."""


class FormatError(ValueError):
    """A serialized file is malformed or does not match its declared layout."""


class CoverageError(ValidationError):
    """A lookup table is missing entries that the caller requires."""


class ConfigurationError(ValueError):
    """Options are individually valid but inconsistent with each other."""


class NumericError(ArithmeticError):
    """A computation produced or encountered non-finite values."""
