"""Exception types shared across the workbench.

Anything raised as a WorkbenchError is a data/content problem (bad file,
bad config, mismatched shapes) and maps to exit code 2 in the CLI; usage
errors (bad flags) map to exit code 1.
"""


class WorkbenchError(Exception):
    """Base class for all data-level errors raised by this package."""


class UnsupportedFormatError(WorkbenchError):
    """File exists but is not in a format this package reads."""


class SchemaError(WorkbenchError):
    """A config document violates the schema; message carries the key path."""
