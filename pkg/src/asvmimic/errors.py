"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: :class:`DataError` -> 2,
:class:`NumericalError` -> 3.
"""


class AsvError(Exception):
    """Base class for all toolkit errors."""


class DataError(AsvError):
    """Malformed, missing or inconsistent input data."""


class ManifestError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class AudioFormatError(DataError):
    pass


class StoreError(DataError):
    pass


class MissingKeyError(StoreError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class VersionMismatchError(StoreError):
    pass


class NumericalError(AsvError):
    """Non-finite objective, singular system or similar numeric failure."""
