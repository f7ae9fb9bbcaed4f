"""Exception hierarchy shared by every shardgrad module."""


class ShardgradError(Exception):
    """Base class for all errors raised by shardgrad."""


class ShapeError(ShardgradError, ValueError):
    """Operand shapes or lengths do not agree."""


class NumericError(ShardgradError, ArithmeticError):
    """A non-finite value entered or left a numeric operation."""


class RangeError(ShardgradError, ValueError):
    """A requested numeric range is empty or inverted."""


class ConfigError(ShardgradError, ValueError):
    """Configuration could not be parsed or violates an invariant."""


class TransportError(ShardgradError, RuntimeError):
    """Message delivery failed (timeout, disconnected peer, closed transport)."""

    def __init__(self, message: str, missing_senders: tuple[int, ...] = ()) -> None:
        super().__init__(message)
        self.missing_senders = missing_senders


class UnsupportedTopologyError(ShardgradError, ValueError):
    """The requested exchange pattern does not support this worker count or network."""


class InfeasiblePartitionError(ShardgradError, ValueError):
    """A weight matrix has fewer columns than there are workers."""


class DataFormatError(ShardgradError, ValueError):
    """Input data does not follow the expected container format."""


class BadMagicError(DataFormatError):
    """IDX header carries an unexpected magic number."""

    def __init__(self, path: str, value: int, expected: int) -> None:
        super().__init__(f"{path}: bad IDX magic {value} (expected {expected})")
        self.value = value
        self.expected = expected


class TruncatedFileError(DataFormatError):
    """File ends before the records its header announces."""


class CountMismatchError(DataFormatError):
    """Image and label files disagree on the record count."""


class EmptyCorpusError(DataFormatError):
    """A text corpus contains no characters."""


class InconsistencyError(ShardgradError, ValueError):
    """Measured statistics cannot belong to the stated cost parameters."""


class BoundUndefinedError(ShardgradError, ValueError):
    """A regret bound is not defined for the requested delay."""


class GradientRejectedError(ShardgradError, ValueError):
    """The parameter server refused a gradient (shape or finiteness)."""
