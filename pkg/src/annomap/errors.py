"""Exception hierarchy shared across the package."""


class AnnomapError(Exception):
    """Base class for all package errors."""


class InvalidInputError(AnnomapError, ValueError):
    pass


class DegenerateError(AnnomapError, ValueError):
    """A statistic is undefined for the given input (e.g. zero variance)."""


class MissingFileError(AnnomapError, FileNotFoundError):
    pass


class DimensionMismatchError(AnnomapError, ValueError):
    pass


class DuplicateAnnotationError(AnnomapError, ValueError):
    pass


class ReferentialIntegrityError(AnnomapError, ValueError):
    pass


class EmptyDatasetError(AnnomapError, ValueError):
    pass


class UnknownAnnotatorError(AnnomapError, KeyError):
    pass


class TrainingDivergedError(AnnomapError, FloatingPointError):
    pass


class CheckpointFormatError(AnnomapError, ValueError):
    pass
