"""Exception hierarchy shared across the package.

Everything raised on bad data derives from :class:`DataError` so the CLI
can map it to a single exit code; programming/usage mistakes raise the
usual built-ins (``ValueError``, ``TypeError``).
"""


class TexroiError(Exception):
    """Base class for all package-specific errors."""


class DataError(TexroiError):
    """Invalid input data (files, manifests, landmark sets, shapes)."""


class ManifestError(DataError):
    """Malformed or inconsistent dataset manifest."""


class ImageFormatError(DataError):
    """Unreadable or unsupported image file."""


class FlatImageError(DataError):
    """Operation undefined on a constant image."""


class LandmarkFormatError(DataError):
    """Unreadable or malformed landmark file."""


class RoiError(DataError):
    """Degenerate patella geometry or ROI outside the image."""


class MaskDegenerateError(DataError):
    """Contour spline produced a self-intersecting or empty mask."""


class SchemaMismatchError(DataError):
    """Feature matrix does not match a trained model's schema."""


class ModelFormatError(DataError):
    """Serialized model payload is corrupt, truncated, or wrong version."""


class FoldError(DataError):
    """Cross-validation folds cannot be built or are inconsistent."""
