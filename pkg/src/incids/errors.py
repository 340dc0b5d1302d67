"""Exception hierarchy shared by every module."""


class IncidsError(Exception):
    """Base class for all package errors."""


class ConfigError(IncidsError):
    pass


class DataError(IncidsError):
    pass


class SchemaError(DataError):
    pass


class NotFittedError(IncidsError):
    pass


class TrainingDivergedError(IncidsError):
    pass


class SnapshotError(IncidsError):
    pass


class ScenarioError(IncidsError):
    """A scenario's expected outcome did not occur."""
