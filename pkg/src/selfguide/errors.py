"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericError -> 3,
ArchiveError and OSError -> 4.
"""


class ConfigError(ValueError):
    """A configuration file or override is invalid."""


class NumericError(RuntimeError):
    """A computation produced non-finite values."""


class FrozenTeacherError(RuntimeError):
    """An attempt was made to modify a frozen guiding model."""


class ArchiveError(Exception):
    """A checkpoint archive is missing, corrupt, or inconsistent."""
