"""Exception types shared across the library.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
TrainingError -> 4.
"""


class IcuFusionError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(IcuFusionError):
    """A configuration value or config file is invalid."""


class DataError(IcuFusionError):
    """Cohort, note, or embedding data is malformed or inconsistent."""


class TrainingError(IcuFusionError):
    """A training run could not proceed or diverged."""


class CohortWarning(UserWarning):
    """A recoverable problem in cohort data (bad line skipped, etc.)."""
