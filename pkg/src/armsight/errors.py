"""Error taxonomy shared across the package.

Each class maps to a distinct CLI exit code so callers can script around
failure categories.
"""


class ArmsightError(Exception):
    """Base class for package errors."""

    exit_code = 1


class ConfigError(ArmsightError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(ArmsightError):
    """Missing, corrupt, or incompatible data artifacts."""

    exit_code = 3


class PrerequisiteError(ArmsightError):
    """A pipeline step was invoked before the artifacts it needs exist."""

    exit_code = 4


class DivergenceError(ArmsightError):
    """Training produced non-finite losses."""

    exit_code = 5
