"""Exception types shared across the package."""


class CodiscoverError(Exception):
    """Base class for package-specific failures."""


class FormatError(CodiscoverError):
    """A file or stream does not match its declared layout."""


class ConfigError(CodiscoverError):
    """Invalid or contradictory run configuration."""
