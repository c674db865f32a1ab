"""Exception types shared across the package.

Usage errors (bad CLI arguments) are left to argparse; everything raised
here signals a data or contract problem and maps to exit code 2 in the CLI.
"""


class DataError(Exception):
    """Base class for data/contract violations."""


class FormatError(DataError):
    """Malformed or inconsistent file content."""


class ValidationError(DataError):
    """An in-memory object violates one of its invariants."""
