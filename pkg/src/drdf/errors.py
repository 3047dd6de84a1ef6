"""Exception types shared across the package.

The CLI maps these onto process exit codes (see `drdf.cli`); library code
raises them directly.
"""


class DrdfError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(DrdfError):
    """Run configuration is missing, malformed, or out of range."""


class NoSurfaceError(DrdfError):
    """A ray has no surface intersection, so its distance field is undefined."""


class NoEvidenceError(DrdfError):
    """A query point is invalid in every input view; nothing to fuse."""


class DegenerateSceneError(DrdfError):
    """Repeated ray sampling found no surface anywhere in the scene."""


class SamplingFailureError(DrdfError):
    """View-set constraints could not be satisfied within the try budget."""


class NumericFailureError(DrdfError):
    """A non-finite value appeared during training or evaluation."""


class UndefinedOverlapError(DrdfError):
    """View overlap is undefined because the reference view hits nothing."""


class NoOverlapError(DrdfError):
    """No camera pair shares any in-frustum points; consistency undefined."""
