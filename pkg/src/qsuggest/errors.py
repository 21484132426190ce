"""Exception types shared across the package.

Each maps to a distinct CLI exit code, see cli.py.
"""


class QsuggestError(Exception):
    """Base class for package errors."""


class InputFormatError(QsuggestError):
    """Malformed or missing input file (exit code 3)."""


class CheckpointError(QsuggestError):
    """Incompatible or corrupt checkpoint (exit code 4)."""


class NumericError(QsuggestError):
    """Non-finite value produced by a numeric operation (exit code 5)."""
