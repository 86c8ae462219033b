"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class StmilError(Exception):
    exit_code = 2


class UsageError(StmilError):
    exit_code = 1


class FormatError(StmilError):
    """Malformed or inconsistent on-disk data."""

    exit_code = 2


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DimOverflowError(FormatError):
    pass


class ShapeError(FormatError):
    pass


class ManifestError(FormatError):
    pass


class AnnotationError(FormatError):
    pass


class NumericalError(StmilError):
    exit_code = 3
