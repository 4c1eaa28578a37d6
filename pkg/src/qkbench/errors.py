"""Exception hierarchy shared by all qkbench modules."""


class QKBenchError(Exception):
    """Base class for every error raised by qkbench."""


class ConfigurationError(QKBenchError, ValueError):
    """Invalid names, dimensions, hyperparameters or search spaces."""


class CapacityError(ConfigurationError):
    """Requested register size exceeds what the simulator supports."""


class QubitIndexError(QKBenchError, IndexError):
    """Gate or operator addresses a qubit outside the register."""


class ShapeError(QKBenchError, ValueError):
    """Array shapes or lengths do not agree."""


class DomainError(QKBenchError, ValueError):
    """A value lies outside the domain of a function (arccos, log, ...)."""


class DegenerateError(QKBenchError, ValueError):
    """Input has no variation or zero norm where a non-trivial one is needed."""


class ConditioningError(QKBenchError, ArithmeticError):
    """A linear system could not be solved reliably."""


class LabelError(QKBenchError, ValueError):
    """Classification labels are unusable (e.g. only one class)."""


class ScoreError(LabelError):
    """A score cannot be computed for the given labels."""


class IngestionError(QKBenchError, OSError):
    """A data file is missing or malformed."""


class SchemaError(QKBenchError, ValueError):
    """Tabular input does not have the expected columns."""


class GenerationError(QKBenchError, RuntimeError):
    """A synthetic dataset generator failed to meet its constraints."""


class InsufficientDataError(QKBenchError, ValueError):
    """Too few observations for the requested analysis."""


class StudyError(QKBenchError, RuntimeError):
    """Every trial of a study failed."""
