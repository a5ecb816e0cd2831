"""Exception types shared across the package."""


class StressSeqError(Exception):
    """Base class for package errors."""


class ConfigError(StressSeqError):
    """Invalid or inconsistent configuration / arguments."""


class DataError(StressSeqError):
    """Dataset layout, file, or manifest problems."""


class DateParseError(DataError):
    """Filename carries no valid YYYYMMDD date substring."""


class TrainingAbort(StressSeqError):
    """Training hit a non-recoverable condition (e.g. non-finite loss)."""
