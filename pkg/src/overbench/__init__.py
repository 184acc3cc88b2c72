"""Microbenchmark harness for observability overhead.

Measures the per-call cost of a record-writing probe against an
uninstrumented baseline, and decides which relative changes are
detectable given the run-to-run noise of an execution environment.
"""

from .errors import (
    ClosedChannelError,
    ComparabilityError,
    ConfigError,
    HistoryLockError,
    InsufficientDataError,
    IntegrityError,
    OverbenchError,
    SchemaError,
    SweepAborted,
    TraceFormatError,
    WorkerError,
)
from .probe import (
    BaselineProbe,
    BinarySink,
    BinaryWriterProbe,
    BoundedRecordQueue,
    DrainReport,
    MonitoringRecord,
    PutStrategy,
    PutStrategyKind,
    StringRegistry,
    VerificationReport,
    drain_loop,
    verify_trace_file,
)
from .runner import (
    BenchmarkRun,
    EnvironmentDescriptor,
    LoopStartResult,
    ProbeKind,
    RunConfig,
    capture_environment,
    load_run,
    run_benchmark,
    run_thread_sweep,
)
from .stats import (
    ChangeDecision,
    MdeConfig,
    MdeMode,
    SampleBasis,
    StatsSummary,
    detect_change,
    minimal_detectable_change,
    normal_quantile,
    summarize,
    summarize_run,
)
from .workload import CallOutcome, WorkloadConfig, execute_monitored_call

__version__ = "0.1.0"
