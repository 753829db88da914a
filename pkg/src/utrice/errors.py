"""Exception types raised across the package."""


class UtriceError(Exception):
    """Base class for all package errors."""


class DegenerateTriangle(UtriceError):
    """Triangle area is at or below the degeneracy threshold."""


class EmptyScene(UtriceError):
    """An operation that needs at least one valid triangle got none."""


class TooFewPoints(UtriceError):
    """Point-cloud initialization needs at least 4 points."""


class ShapeMismatch(UtriceError):
    """Two images (or buffers) that must agree in shape do not."""


class Malformed(UtriceError):
    """A file failed strict validation."""


class UnsupportedVersion(UtriceError):
    """Checkpoint format version is not understood."""


class MissingProperty(UtriceError):
    """A required property is absent from a PLY file; names the property."""


class DatasetEmpty(UtriceError):
    """The training dataset has no usable views."""


class DivergenceError(UtriceError):
    """Training loss was non-finite for too many consecutive iterations."""


class ConfigError(UtriceError):
    """Bad configuration key or value; names the offender."""
