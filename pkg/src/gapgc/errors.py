"""Exception hierarchy shared by every module."""


class GapgcError(Exception):
    pass


class ShapeError(GapgcError, ValueError):
    pass


class DomainError(GapgcError, ValueError):
    pass


class NumericError(GapgcError, FloatingPointError):
    pass


class ContractError(GapgcError, ValueError):
    pass


class DeterminismError(GapgcError):
    pass


class ParseError(GapgcError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ValidationError(GapgcError, ValueError):
    pass


class ConfigError(GapgcError, ValueError):
    pass


class SplitError(GapgcError, ValueError):
    pass


class StatisticsError(GapgcError, ValueError):
    pass


class TrainingError(GapgcError, RuntimeError):
    pass


class AdaptationError(GapgcError, RuntimeError):
    pass


class MetricError(GapgcError, ValueError):
    pass


class IndexRangeError(GapgcError, IndexError):
    pass
