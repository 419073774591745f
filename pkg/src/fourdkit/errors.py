"""Exception hierarchy shared across the package."""


class FourDKitError(Exception):
    """Base class for all errors raised by fourdkit."""


class InvalidIntrinsicsError(FourDKitError, ValueError):
    pass


class DimensionError(FourDKitError, ValueError):
    pass


class InvariantViolation(FourDKitError, ValueError):
    pass


class DegenerateScaleError(FourDKitError, ValueError):
    """No valid points to compute a scene scale from."""


class AlignmentDegenerateError(FourDKitError, ValueError):
    """Median-scale alignment had no usable ratio."""


class BundleError(FourDKitError):
    """Base class for on-disk bundle problems."""


class VersionMismatchError(BundleError):
    pass


class MissingFileError(BundleError, FileNotFoundError):
    pass


class SizeMismatchError(BundleError):
    pass


class PoseConventionError(BundleError):
    """View 0 pose is not the identity."""


class HeaderError(BundleError):
    """Grid file has a bad magic header or byte-order marker."""
