"""Exception types raised by metaknn. The command line interface maps each of them to an exit code."""

__all__ = [
    "MetaKnnError",
    "DatastoreFormatError",
    "EmptyDatastoreError",
    "NumericError",
    "MissingInputError",
]


class MetaKnnError(Exception):
    """Base class of all metaknn errors."""


class DatastoreFormatError(MetaKnnError, ValueError):
    """A binary datastore or context-pair file violates its format.

    Attributes
    ----------
    code : str
        One of ``"bad_magic"``, ``"version_mismatch"``, ``"truncated"``, ``"bad_header"`` or
        ``"trailing_bytes"``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class EmptyDatastoreError(MetaKnnError, ValueError):
    """Retrieval was attempted on a datastore without entries."""

    def __init__(self, message: str = "empty datastore"):
        super().__init__(message)


class NumericError(MetaKnnError, ArithmeticError):
    """A non-finite value was encountered."""


class MissingInputError(MetaKnnError, FileNotFoundError):
    """An input file required by a workflow does not exist."""
