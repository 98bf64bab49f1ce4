"""Exception taxonomy shared across the package.

The CLI maps these to exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.  Anything else escaping a pipeline stage is reported as a
stage failure with exit code 3.
"""


class MetarecError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MetarecError):
    """Bad usage: unknown config keys, invalid values, impossible model shapes."""


class DataError(MetarecError):
    """Input data is missing, malformed beyond tolerance, or degenerate."""


class NumericError(MetarecError):
    """A numeric invariant broke (non-finite values, undefined statistics)."""
