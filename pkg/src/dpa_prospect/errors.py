"""Exception hierarchy shared across the package."""


class DPAError(Exception):
    """Base class for all package errors."""


class InvalidSchemaError(DPAError, ValueError):
    pass


class InvalidEventError(DPAError, ValueError):
    """A record is malformed (bad label, non-finite weight, unknown feature).

    ``index`` is set when the error is raised from inside a batch.
    """

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"event {index}: {message}")
        self.index = index


class IncompleteEventError(InvalidEventError):
    pass


class FrozenModelError(DPAError, RuntimeError):
    pass


class NotScorableError(DPAError, ValueError):
    pass


class UndefinedMetricError(DPAError, ValueError):
    pass


class EmptyCurveError(DPAError, ValueError):
    pass


class ConfigError(DPAError, ValueError):
    pass


class StageError(DPAError, RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
