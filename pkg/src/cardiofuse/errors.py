"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation/configuration problems
exit 2, training failures exit 3, artifact-kind mismatches exit 4.
"""


class CardiofuseError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(CardiofuseError):
    """A domain value violates its contract (bad spec field, bad clip, ...)."""


class ClipFormatError(CardiofuseError):
    """A clip file does not conform to the ECV1 binary layout."""


class BadMagicError(ClipFormatError):
    """File does not start with the ECV1 magic bytes."""


class TruncatedClipError(ClipFormatError):
    """File ends before the declared header or payload is complete."""


class PayloadSizeError(ClipFormatError):
    """Payload length disagrees with the dimensions in the header."""


class DatasetError(CardiofuseError):
    """A manifest or table is inconsistent (missing file, duplicate id, ...)."""


class ConfigurationError(CardiofuseError):
    """A run configuration is invalid (unknown preset, bad override, ...)."""


class TrainingError(CardiofuseError):
    """Training cannot proceed or diverged (single-class split, NaN loss)."""


class ArtifactKindError(CardiofuseError):
    """A checkpoint or model has the wrong kind for the requested operation."""
