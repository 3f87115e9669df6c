"""Exception types shared across the package."""


class StoryAlignError(Exception):
    """Base class for all package errors."""


class FormatError(StoryAlignError):
    """Raised when an on-disk artifact does not match its declared layout."""


class DegenerateInputError(StoryAlignError):
    """Raised for numerically degenerate inputs (zero vectors, log of zero)."""


class ConfigError(StoryAlignError):
    """Raised when a configuration value violates its invariants."""
