"""Exception types shared across the package."""


class TensorFormatError(ValueError):
    """Raised when DFGT bytes are malformed or a tensor cannot be encoded."""


class ValidationError(ValueError):
    """Raised when an input array violates a documented invariant."""


class ClassAbsentError(ValueError):
    """Raised when a search is requested for a class the model never predicts.

    Callers are expected to catch this and skip the class for the slice.
    """


class EmptyMaskError(ValueError):
    """Raised when a metric is undefined because a mask is empty."""


class ConfigError(ValueError):
    """Raised for invalid run configuration before any work starts."""


class BackendError(RuntimeError):
    """Raised when a segmenter backend fails or replies with an error."""


class FeatureCapabilityError(BackendError):
    """Raised when a backend cannot serve per-pixel feature maps."""
