"""Exception hierarchy shared by every module."""


class DQMILError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DQMILError, ValueError):
    pass


class ParameterError(DQMILError, ValueError):
    pass


class ContractError(DQMILError, ValueError):
    pass


class StateError(DQMILError, RuntimeError):
    pass


class NumericError(DQMILError, FloatingPointError):
    """Raised when NaN or Inf shows up at an operation boundary."""


class EmptyInputError(DQMILError, ValueError):
    pass


class ConfigError(DQMILError, ValueError):
    pass


class SchemaError(DQMILError, ValueError):
    pass


class AlignmentError(DQMILError, ValueError):
    pass


class LabelError(DQMILError, ValueError):
    pass


class TrainingAbort(DQMILError, RuntimeError):
    pass


class FormatError(DQMILError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    pass


class StratificationError(DQMILError, ValueError):
    pass


class UndefinedMetricError(DQMILError, ValueError):
    pass
