"""Benchmark orchestration: loop starts, parallel workers, raw-run files."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import itertools
import json
import logging
import os
import platform
import resource
import socket
import statistics
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from .errors import ConfigError, IntegrityError, OverbenchError, SweepAborted, WorkerError
from .probe import (
    DEFAULT_QUEUE_CAPACITY,
    BaselineProbe,
    BinarySink,
    BinaryWriterProbe,
    BoundedRecordQueue,
    DrainReport,
    PutStrategy,
    PutStrategyKind,
    StringRegistry,
    drain_loop,
    verify_trace_file,
)
from .workload import WorkloadConfig, execute_monitored_call

log = logging.getLogger(__name__)

RUN_FILE_KIND = "overbench-run"
RUN_FILE_VERSION = 1


class ProbeKind(enum.Enum):
    BASELINE = "baseline"
    BINARY_WRITER = "binary-writer"

    @property
    def label(self) -> str:
        return {"baseline": "Baseline", "binary-writer": "Binary Writer"}[self.value]


@dataclass(frozen=True)
class RunConfig:
    loops: int = 10
    calls_per_loop: int = 100_000
    warmup_fraction: float = 0.5
    workers: int = 1
    probe_kind: ProbeKind = ProbeKind.BASELINE
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    put_strategy: PutStrategyKind = PutStrategyKind.YIELD
    output_dir: Path = Path("overbench-out")
    spawn: bool = False
    keep_traces: bool = True
    unsafe_allow_mismatch: bool = False

    def __post_init__(self) -> None:
        if self.loops < 2:
            raise ConfigError("at least 2 loop starts are needed to estimate variance")
        if self.calls_per_loop < 1:
            raise ConfigError("calls_per_loop must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.queue_capacity < 1:
            raise ConfigError("queue capacity must be >= 1")
        if (self.workers > 1 and self.put_strategy is not PutStrategyKind.YIELD
                and not self.unsafe_allow_mismatch):
            raise ConfigError(
                "the single-producer put strategy only works with one worker; "
                "use --put-strategy yield for parallel runs"
            )
        object.__setattr__(self, "output_dir", Path(self.output_dir))

    def to_dict(self) -> dict[str, Any]:
        return {
            "loops": self.loops,
            "calls_per_loop": self.calls_per_loop,
            "warmup_fraction": self.warmup_fraction,
            "workers": self.workers,
            "probe_kind": self.probe_kind.value,
            "workload": dataclasses.asdict(self.workload),
            "queue_capacity": self.queue_capacity,
            "put_strategy": self.put_strategy.value,
            "output_dir": str(self.output_dir),
            "spawn": self.spawn,
            "keep_traces": self.keep_traces,
            "unsafe_allow_mismatch": self.unsafe_allow_mismatch,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        data = dict(data)
        data["probe_kind"] = ProbeKind(data["probe_kind"])
        data["workload"] = WorkloadConfig(**data["workload"])
        data["put_strategy"] = PutStrategyKind(data["put_strategy"])
        data["output_dir"] = Path(data["output_dir"])
        return cls(**data)

    def comparable_key(self) -> tuple:
        """Everything that influences measurements (not where files go)."""
        d = self.to_dict()
        del d["output_dir"], d["keep_traces"]
        return tuple(sorted((k, json.dumps(v, sort_keys=True)) for k, v in d.items()))

    def digest(self) -> str:
        return hashlib.sha256(repr(self.comparable_key()).encode()).hexdigest()[:12]


@dataclass(frozen=True)
class EnvironmentDescriptor:
    hostname: str
    os_name: str
    os_version: str
    cpu_model: str
    logical_cpus: int
    memory_bound_bytes: Optional[int]
    clock_resolution_ns: float

    def digest(self) -> str:
        """Identity of the machine; the clock estimate is left out since it jitters."""
        ident = [self.hostname, self.os_name, self.os_version, self.cpu_model,
                 self.logical_cpus, self.memory_bound_bytes]
        return hashlib.sha256(json.dumps(ident).encode()).hexdigest()[:16]

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EnvironmentDescriptor":
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in fields})


@dataclass
class LoopStartResult:
    loop_index: int
    durations: list[int]
    drain_report: Optional[DrainReport] = None
    trace_path: Optional[Path] = None
    queue_stats: Optional[dict[str, int]] = None
    checksum_fold: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "loop_index": self.loop_index,
            "durations": self.durations,
            "drain_report": dataclasses.asdict(self.drain_report) if self.drain_report else None,
            "trace_path": str(self.trace_path) if self.trace_path else None,
            "queue_stats": self.queue_stats,
            "checksum_fold": self.checksum_fold,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LoopStartResult":
        drain = data.get("drain_report")
        trace = data.get("trace_path")
        return cls(
            loop_index=data["loop_index"],
            durations=list(data["durations"]),
            drain_report=DrainReport(**drain) if drain else None,
            trace_path=Path(trace) if trace else None,
            queue_stats=data.get("queue_stats"),
            checksum_fold=data.get("checksum_fold", 0),
        )


@dataclass
class BenchmarkRun:
    config: RunConfig
    loop_results: list[LoopStartResult]
    environment: EnvironmentDescriptor
    started_at: datetime
    checksum_fold: int
    path: Optional[Path] = None

    @property
    def name(self) -> str:
        label = self.config.probe_kind.label
        if self.config.workers > 1:
            label += f" ({self.config.workers} threads)"
        return label

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": RUN_FILE_KIND,
            "schema_version": RUN_FILE_VERSION,
            "started_at": self.started_at.isoformat(),
            "checksum_fold": self.checksum_fold,
            "config": self.config.to_dict(),
            "environment": self.environment.to_dict(),
            "loops": [lr.to_dict() for lr in self.loop_results],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BenchmarkRun":
        if data.get("kind") != RUN_FILE_KIND:
            raise ConfigError("not an overbench raw-run file")
        return cls(
            config=RunConfig.from_dict(data["config"]),
            loop_results=[LoopStartResult.from_dict(d) for d in data["loops"]],
            environment=EnvironmentDescriptor.from_dict(data["environment"]),
            started_at=datetime.fromisoformat(data["started_at"]),
            checksum_fold=data["checksum_fold"],
        )


def save_run(run: BenchmarkRun, directory: Path) -> Path:
    """Write ``run-<timestamp>.json``; never overwrites an existing file."""
    directory.mkdir(parents=True, exist_ok=True)
    stamp = run.started_at.strftime("%Y%m%dT%H%M%S%fZ")
    payload = json.dumps(run.to_dict(), separators=(",", ":"))
    for attempt in itertools.count():
        suffix = f"-{attempt}" if attempt else ""
        path = directory / f"run-{stamp}{suffix}.json"
        try:
            with open(path, "x", encoding="utf-8") as fh:
                fh.write(payload)
        except FileExistsError:
            continue
        run.path = path
        return path
    raise AssertionError("unreachable")


def load_run(path: os.PathLike | str) -> BenchmarkRun:
    with open(path, encoding="utf-8") as fh:
        run = BenchmarkRun.from_dict(json.load(fh))
    run.path = Path(path)
    return run


# -- environment ---------------------------------------------------------

def _cpu_model() -> str:
    try:
        with open("/proc/cpuinfo", encoding="utf-8") as fh:
            for line in fh:
                key, _, value = line.partition(":")
                if key.strip() in ("model name", "Hardware", "Processor"):
                    return value.strip()
    except OSError:
        pass
    return platform.processor() or "unknown"


def _memory_bound() -> Optional[int]:
    bounds = []
    try:
        soft, _ = resource.getrlimit(resource.RLIMIT_AS)
        if soft != resource.RLIM_INFINITY:
            bounds.append(soft)
    except (ValueError, OSError):
        pass
    for cgroup_file in ("/sys/fs/cgroup/memory.max",
                        "/sys/fs/cgroup/memory/memory.limit_in_bytes"):
        try:
            text = Path(cgroup_file).read_text().strip()
        except OSError:
            continue
        if text.isdigit() and int(text) < 1 << 60:
            bounds.append(int(text))
    try:
        bounds.append(os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES"))
    except (ValueError, OSError, AttributeError):
        pass
    return min(bounds) if bounds else None


def estimate_clock_resolution(samples: int = 1000) -> float:
    """Median of back-to-back monotonic clock deltas, in ns (always > 0)."""
    clock = time.perf_counter_ns
    deltas = []
    for _ in range(samples):
        a = clock()
        b = clock()
        while b == a:
            b = clock()
        deltas.append(b - a)
    resolution = float(statistics.median(deltas))
    if resolution <= 0:
        resolution = max(time.get_clock_info("perf_counter").resolution * 1e9, 1.0)
    return resolution


def capture_environment() -> EnvironmentDescriptor:
    return EnvironmentDescriptor(
        hostname=socket.gethostname() or "unknown",
        os_name=platform.system() or "unknown",
        os_version=platform.release() or "unknown",
        cpu_model=_cpu_model(),
        logical_cpus=os.cpu_count() or 1,
        memory_bound_bytes=_memory_bound(),
        clock_resolution_ns=estimate_clock_resolution(),
    )


# -- execution -----------------------------------------------------------

def _time_calls(workload: WorkloadConfig, probe, calls: int) -> tuple[list[int], int]:
    durations = [0] * calls
    fold = 0
    for i in range(calls):
        checksum, durations[i] = execute_monitored_call(workload, probe)
        fold += checksum
    return durations, fold


def _run_workers(cfg: RunConfig, probes: list) -> tuple[list[list[int]], int]:
    if len(probes) == 1:
        durations, fold = _time_calls(cfg.workload, probes[0], cfg.calls_per_loop)
        return [durations], fold

    results: list[Optional[tuple[list[int], int]]] = [None] * len(probes)
    errors: list[BaseException] = []
    start = threading.Barrier(len(probes))

    def work(index: int) -> None:
        try:
            start.wait()
            results[index] = _time_calls(cfg.workload, probes[index], cfg.calls_per_loop)
        except BaseException as exc:  # noqa: BLE001 - re-raised by the runner
            errors.append(exc)
            start.abort()

    threads = [threading.Thread(target=work, args=(i,), name=f"overbench-worker-{i}")
               for i in range(len(probes))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    real = [e for e in errors if not isinstance(e, threading.BrokenBarrierError)]
    if errors:
        raise WorkerError(f"worker failed: {(real or errors)[0]!r}") from (real or errors)[0]
    per_worker = [r[0] for r in results]  # type: ignore[index]
    return per_worker, sum(r[1] for r in results)  # type: ignore[index]


def run_loop_start(cfg: RunConfig, loop_index: int, trace_path: Optional[Path]) -> LoopStartResult:
    """One loop start with fresh probe state (new queue, sink and counters)."""
    workload = cfg.workload
    queue = None
    if cfg.probe_kind is ProbeKind.BASELINE:
        probes = [BaselineProbe() for _ in range(cfg.workers)]
        per_worker, fold = _run_workers(cfg, probes)
        report = None
    else:
        assert trace_path is not None
        registry = StringRegistry()
        signature_id = registry.register(workload.signature)
        queue = BoundedRecordQueue(
            cfg.queue_capacity,
            PutStrategy(cfg.put_strategy, cfg.workers),
            unsafe_allow_mismatch=cfg.unsafe_allow_mismatch,
        )
        sink = BinarySink(trace_path, registry).open()
        outcome: dict[str, Any] = {}

        def consume() -> None:
            try:
                outcome["report"] = drain_loop(queue, sink)
            except BaseException as exc:  # noqa: BLE001
                outcome["error"] = exc

        consumer = threading.Thread(target=consume, name="overbench-consumer")
        consumer.start()
        trace_ids = itertools.count()
        probes = [BinaryWriterProbe(queue, signature_id, trace_ids) for _ in range(cfg.workers)]
        try:
            per_worker, fold = _run_workers(cfg, probes)
        finally:
            queue.close()
            consumer.join()
        if "error" in outcome:
            raise outcome["error"]
        report = outcome["report"]
        expected = cfg.workers * cfg.calls_per_loop * workload.recursion_depth
        verification = verify_trace_file(sink.path, workload.recursion_depth)
        if not verification.ok or verification.records != expected:
            raise IntegrityError(
                f"loop {loop_index}: trace {sink.path} failed verification "
                f"(expected {expected} records; {verification.summary()})"
            )
        trace_path = sink.path
        if not cfg.keep_traces:
            trace_path.unlink()
            trace_path = None

    # interleave by call index so warmup removal trims every worker equally
    pooled = [d for calls in zip(*per_worker) for d in calls]
    return LoopStartResult(
        loop_index=loop_index,
        durations=pooled,
        drain_report=report,
        trace_path=trace_path,
        queue_stats=None if queue is None else {
            "enqueued": queue.enqueued,
            "drained": queue.drained,
            "yield_waits": queue.yield_waits,
            "max_occupancy": queue.max_occupancy,
            "capacity": queue.capacity,
        },
        checksum_fold=fold,
    )


def _spawn_loop_start(cfg: RunConfig, loop_index: int, trace_path: Optional[Path]) -> LoopStartResult:
    request = json.dumps({
        "config": cfg.to_dict(),
        "loop_index": loop_index,
        "trace_path": str(trace_path) if trace_path else None,
    })
    proc = subprocess.run(
        [sys.executable, "-m", "overbench._loopstart"],
        input=request, capture_output=True, text=True,
    )
    try:
        reply = json.loads(proc.stdout)
    except json.JSONDecodeError:
        raise WorkerError(
            f"loop {loop_index}: child exited {proc.returncode}: {proc.stderr.strip()[-500:]}"
        ) from None
    if "error" in reply:
        kind = IntegrityError if reply["error"] == "IntegrityError" else WorkerError
        raise kind(f"loop {loop_index}: {reply['message']}")
    return LoopStartResult.from_dict(reply)


def run_benchmark(cfg: RunConfig, *, save: bool = True) -> BenchmarkRun:
    """Execute ``cfg.loops`` loop starts and (by default) write the raw-run file."""
    started_at = datetime.now(timezone.utc)
    environment = capture_environment()
    stamp = started_at.strftime("%Y%m%dT%H%M%S%fZ")
    trace_dir = None
    if cfg.probe_kind is ProbeKind.BINARY_WRITER:
        trace_dir = cfg.output_dir / f"traces-{stamp}-w{cfg.workers}"
        trace_dir.mkdir(parents=True, exist_ok=True)
    execute = _spawn_loop_start if cfg.spawn else run_loop_start

    loop_results = []
    for i in range(cfg.loops):
        trace_path = trace_dir / f"loop-{i:03d}.obmb" if trace_dir else None
        log.info("loop start %d/%d (%s, %d workers)", i + 1, cfg.loops,
                 cfg.probe_kind.value, cfg.workers)
        loop_results.append(execute(cfg, i, trace_path))
    if trace_dir is not None and not cfg.keep_traces:
        try:
            trace_dir.rmdir()
        except OSError:
            pass

    run = BenchmarkRun(
        config=cfg,
        loop_results=loop_results,
        environment=environment,
        started_at=started_at,
        checksum_fold=sum(lr.checksum_fold for lr in loop_results),
    )
    if save:
        save_run(run, cfg.output_dir)
    return run


def run_thread_sweep(
    base: RunConfig,
    worker_counts: Sequence[int],
    on_run: Optional[Callable[[BenchmarkRun], None]] = None,
) -> list[BenchmarkRun]:
    """One run per worker count; completed runs survive a later failure."""
    if not worker_counts:
        raise ConfigError("worker_counts must not be empty")
    configs = []
    for count in worker_counts:
        if count < 1:
            raise ConfigError(f"worker counts must be >= 1, got {count}")
        configs.append(dataclasses.replace(base, workers=count))
    runs: list[BenchmarkRun] = []
    for cfg in configs:
        try:
            run = run_benchmark(cfg)
        except OverbenchError as exc:
            raise SweepAborted(f"sweep stopped at {cfg.workers} workers: {exc}", runs) from exc
        runs.append(run)
        if on_run is not None:
            on_run(run)
    return runs
