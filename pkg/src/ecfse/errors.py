"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for unreadable input,
3 for model/configuration defects, 4 for numerical failures.
"""


class EcfseError(Exception):
    exit_code = 1


class ParseError(EcfseError):
    exit_code = 2

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(EcfseError):
    exit_code = 3


class ModelError(EcfseError):
    exit_code = 3


class ConfigurationError(EcfseError):
    exit_code = 3


class DegenerateMeasurementError(ModelError):
    pass


class QueryError(ModelError):
    pass


class NoReferenceError(ModelError):
    """The estimation problem has no angle reference (no PMU, or an island without one)."""


class BatchError(ModelError):
    pass


class SolverError(EcfseError):
    exit_code = 4


class ObservabilityError(SolverError):
    pass


class InsufficientDataError(EcfseError):
    exit_code = 4
