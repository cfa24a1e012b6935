"""Exception hierarchy. CLI exit codes hang off these classes."""


class DdiError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(DdiError, ValueError):
    exit_code = 2


class FormatError(DdiError, ValueError):
    """A data file could not be parsed. ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class IndexRangeError(FormatError):
    pass


class MissingDrugError(DdiError, KeyError):
    def __init__(self, drug):
        super().__init__(f"drug {drug} has no vector in the table")
        self.drug = drug

    def __str__(self):
        return self.args[0]


class LeakageError(DdiError):
    """Raised when a KD edge set fails the leakage checks."""

    exit_code = 3

    def __init__(self, report):
        super().__init__(f"leakage check failed: {report.summary()}")
        self.report = report


class ChecksumError(DdiError):
    exit_code = 4


class UndefinedMetricError(DdiError, ValueError):
    pass


class TrainingError(DdiError, RuntimeError):
    """Non-finite loss or similar divergence during training."""
