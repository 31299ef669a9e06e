"""Exception types shared across the package."""


class HyperstainError(Exception):
    """Base class for package errors."""


class DimensionError(HyperstainError, ValueError):
    """Tensor or raster shapes do not satisfy an operation's contract."""


class VocabularyError(HyperstainError, KeyError):
    """Marker name or index not present in the vocabulary."""


class NumericError(HyperstainError, ArithmeticError):
    """A computation produced non-finite values."""


class FormatError(HyperstainError, ValueError):
    """On-disk container is malformed or has an unsupported version."""


class DegenerateStatisticError(HyperstainError, ValueError):
    """A statistic is undefined for the given data (e.g. zero variance)."""


class StratificationError(HyperstainError, ValueError):
    """Cross-validation folds cannot be stratified for the given labels."""


class TrainingError(HyperstainError, RuntimeError):
    """Training aborted (non-finite loss or refused optimizer step)."""
