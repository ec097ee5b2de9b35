"""Exception types shared across the package."""


class TraincertError(Exception):
    """Base class for all package errors."""


class InvalidShape(TraincertError):
    """Matrix or tensor dimensions are incompatible with the operation."""


class InvalidSpec(TraincertError):
    """A configuration object violates its own invariants."""


class InvalidArgument(TraincertError):
    """An argument is outside the operation's accepted range."""


class InvalidToken(TraincertError):
    """A token id is outside the declared vocabulary."""


class InvalidPermutation(TraincertError):
    """A layer-target permutation violates the validity constraints.

    ``index`` is the 1-based position of the first offending entry.
    """

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class NumericalFailure(TraincertError):
    """A computation produced non-finite values or diverged."""


class TooLarge(TraincertError):
    """Problem size exceeds an exhaustive-enumeration bound."""


class FormatError(TraincertError):
    """A file does not conform to its expected binary/text format.

    ``offset`` is the byte offset where parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset
