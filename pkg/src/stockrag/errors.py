"""Exception hierarchy shared across the engine.

The CLI maps each category to an exit status, so new failure modes should
subclass one of these rather than raising bare exceptions.
"""


class EngineError(Exception):
    """Base class for all engine failures."""

    exit_code = 1


class DataError(EngineError):
    """Malformed or inconsistent input data (bad CSV rows, duplicate keys)."""


class DomainError(EngineError, ValueError):
    """A numeric argument outside the domain of a function."""


class PartitionError(EngineError):
    """A partition spec that is not disjoint or misses a ticker."""


class InsufficientHistory(EngineError):
    """Not enough prior trading days to build a window."""


class PoolError(EngineError):
    """Illegal candidate-pool operation (e.g. non-contiguous advance)."""


class TemplateError(EngineError):
    """Prompt template with unknown or missing placeholders."""


class ForecasterError(EngineError):
    """The forecaster could not be reached or returned garbage."""

    exit_code = 5


class TrainingDiverged(EngineError):
    """Loss became non-finite during retriever training."""


class ConfigError(EngineError):
    exit_code = 3


class ManifestMismatch(EngineError):
    """An input artifact no longer matches the hash recorded when it was built."""

    exit_code = 4
