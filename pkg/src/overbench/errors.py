"""Exception hierarchy shared by the harness modules."""


class OverbenchError(Exception):
    """Base class for all harness errors."""


class ConfigError(OverbenchError, ValueError):
    """Invalid configuration or arguments."""


class ClosedChannelError(OverbenchError):
    """Enqueue attempted after the queue was shut down."""


class TraceFormatError(OverbenchError):
    """Trace file has a bad header, unknown frame tag or is truncated."""


class IntegrityError(OverbenchError):
    """A run produced a trace file that failed verification."""


class InsufficientDataError(OverbenchError, ValueError):
    """Fewer than two samples left after warmup removal."""


class ComparabilityError(OverbenchError):
    """Two runs were measured under different configurations."""


class HistoryLockError(OverbenchError):
    """Another writer holds the history lock; retrying later may succeed."""

    retryable = True


class SchemaError(OverbenchError):
    """History file has an unsupported schema version."""


class WorkerError(OverbenchError):
    """A benchmark worker (thread or spawned process) failed."""


class SweepAborted(OverbenchError):
    """A thread sweep stopped early; ``completed`` holds the finished runs."""

    def __init__(self, message: str, completed: list) -> None:
        super().__init__(message)
        self.completed = completed
