"""Exception taxonomy shared across the package.

Every library error derives from ``KvEvictError`` and carries an ``exit_code``
used by the CLI: 2 for configuration problems, 3 for I/O problems, 4 for
malformed or inconsistent data.
"""


class KvEvictError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(KvEvictError):
    """Invalid configuration value or combination (budget, kernel, preset...)."""

    exit_code = 2


class WindowError(ConfigError):
    """Perturbation-window start outside the valid query-row range."""


class IoError(KvEvictError):
    """Filesystem-level failure while reading or writing artifacts."""

    exit_code = 3


class DataError(KvEvictError):
    """Inconsistent or malformed data handed to a library operation."""

    exit_code = 4


class ShapeError(DataError):
    """Array dimensions do not match the operation's contract."""


class DegenerateRowError(DataError):
    """Softmax over a row with no finite entry."""


class OrderingError(DataError):
    """Cache append with a non-monotone original position."""


class PositionError(DataError):
    """Token position outside the cached range."""


class AccumulatorError(DataError):
    """Score accumulator fed positions that do not match its state."""


class AggregationError(DataError):
    """Head-group aggregation over heterogeneous score vectors."""


class SemanticsError(DataError):
    """Pruning semantics unsupported by the requested operation."""


class MetricError(DataError):
    """Ill-posed metric request (k out of range, mismatched lengths...)."""


class TraceError(DataError):
    """Base class for trace-container format violations."""


class TraceMagicError(TraceError):
    """File does not start with the trace magic bytes."""


class TraceVersionError(TraceError):
    """Trace container version is not supported."""


class TraceShapeError(TraceError):
    """Header fields and tensor payload disagree."""


class TraceTruncatedError(TraceError):
    """Payload ends before the header-declared tensors are complete."""
