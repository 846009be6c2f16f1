"""Exception hierarchy shared by all photocal modules."""

from __future__ import annotations


class PhotocalError(Exception):
    """Base class for every error raised by the package."""


class DomainError(PhotocalError, ValueError):
    """An argument lies outside the domain of a function."""


class ModelError(PhotocalError, ValueError):
    """A photometric model violates its invariants."""


class StateError(PhotocalError):
    """An object is used in a state that does not allow the operation."""


class DataError(PhotocalError, ValueError):
    """Input data is inconsistent or incomplete."""


class NotReadyError(PhotocalError):
    """Not enough data has been accumulated to run an estimator."""


class UnobservableError(PhotocalError):
    """The data cannot constrain the requested quantity."""


class SequenceError(PhotocalError):
    """Frames arrived out of order."""


class EmptyResidualError(PhotocalError):
    """No residual could be evaluated."""


class UndefinedEnergyError(PhotocalError):
    """Both terms of the joint energy are empty."""


class AlignmentError(PhotocalError):
    """Trajectory alignment is not determined by the given samples."""


class GenerationError(PhotocalError):
    """A synthetic scene violates its generation constraints."""


class FormatError(PhotocalError, ValueError):
    """A file does not follow its format. Carries the offending location."""

    def __init__(self, message: str, path=None, line: int | None = None, offset: int | None = None):
        self.path = None if path is None else str(path)
        self.line = line
        self.offset = offset  # byte offset, for binary files
        loc = self.path or "<stream>"
        if line is not None:
            loc = f"{loc}:{line}"
        if offset is not None:
            loc = f"{loc}:byte {offset}"
        self.location = loc
        super().__init__(f"{loc}: {message}")


class ParseError(FormatError):
    """A text line could not be parsed."""


class RecordError(FormatError, DataError):
    """A well-formed file record carries an invalid value."""
