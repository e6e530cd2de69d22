"""Exception hierarchy shared by every stage of the pipeline."""


class StainAlignError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(StainAlignError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateInputError(InvalidInputError):
    """Input carries no usable information (e.g. an all-zero histogram)."""


class EmptySlideError(InvalidInputError):
    """A slide produced no tissue patches."""


class UndefinedMetricError(StainAlignError):
    """A metric is undefined on the given sample (e.g. AUC with one class)."""


class UnstableCIError(StainAlignError):
    """Too many bootstrap resamples were undefined to trust the interval."""


class NumericalError(StainAlignError, ArithmeticError):
    """A loss or gradient became non-finite."""


class FormatError(StainAlignError):
    """A binary or text file does not conform to its declared format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ManifestError(FormatError):
    """A manifest row is malformed; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        StainAlignError.__init__(self, message)
        self.offset = None
        self.line = line
