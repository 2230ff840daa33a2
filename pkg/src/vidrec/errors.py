"""Exception hierarchy; the CLI maps these onto exit codes."""


class VidrecError(Exception):
    """Base class for all package errors."""


class DataError(VidrecError, ValueError):
    """Malformed or inconsistent input data (CLI exit code 3)."""


class DimensionMismatch(DataError):
    pass


class UnknownEntity(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class FormatError(DataError):
    """Bad magic, unsupported version or truncated file."""


class TrainingError(DataError):
    pass


class ExternalServiceError(VidrecError):
    """Judge transport failure after retries (CLI exit code 4)."""
