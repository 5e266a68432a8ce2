"""Exception types shared across the package.

The command line front end maps these onto process exit codes:
ConfigError -> 1, DataFormatError -> 2, NumericError -> 3.
"""


class ConfigError(Exception):
    """Invalid or unknown configuration input."""


class DataFormatError(Exception):
    """On-disk data does not match the expected layout."""


class NumericError(Exception):
    """Training or evaluation produced a non-finite quantity."""


class UndefinedMetricError(ValueError):
    """A metric was requested on input where it has no defined value."""


class CapacityError(ValueError):
    """An exhaustive computation was asked to exceed its size limit."""
