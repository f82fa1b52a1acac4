"""Exception types shared across the package."""


class FatsegError(Exception):
    """Base class for package-specific errors."""


class VolumeFormatError(FatsegError):
    """Raised when a volume container file is malformed."""


class DimensionError(FatsegError, ValueError):
    """Raised when array shapes do not satisfy an operation's contract."""


class ConfigError(FatsegError, ValueError):
    """Raised for invalid configuration values."""


class MissingArtifactError(FatsegError):
    """Raised when a required upstream artifact (weights, manifest) is absent."""


class LocalizationError(FatsegError):
    """Raised when no slice satisfies the abdominal-coverage rule."""


class DegenerateDataError(FatsegError, ValueError):
    """Raised when a statistic is undefined for the given data."""
