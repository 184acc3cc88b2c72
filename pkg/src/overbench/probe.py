"""Observability pipeline under test.

Monitoring records flow from the instrumented workload through a bounded
ring buffer into a single consumer that serializes them to a binary trace
file.  Two producer-side put strategies are available:

* ``YIELD`` is safe for any number of producers.  A full queue makes the
  producer spin for a bounded number of attempts, then yield the CPU.
* ``SINGLE_PRODUCER_BLOCKING`` assumes it owns the producer index.  It
  caches that index across a blocking wait, which silently loses or
  reorders records when more than one producer is attached.  Queues refuse
  that combination unless ``unsafe_allow_mismatch`` is set.

Trace file layout (little-endian)::

    "OBMB" u32 version
    frames: i32 tag
        -1  registry entry: i32 id, u32 len, utf-8 bytes
         1  record: i32 signature_id, i64 trace_id, i32 order_index,
                    i64 tin_ns, i64 tout_ns
         0  terminator
"""

from __future__ import annotations

import enum
import itertools
import os
import struct
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, NamedTuple, Optional

import numpy as np

from .errors import ClosedChannelError, ConfigError, TraceFormatError

__all__ = [
    "DEFAULT_QUEUE_CAPACITY",
    "YIELD_SPIN_TRIES",
    "DEFAULT_SPIN_TRIES",
    "MAGIC",
    "FORMAT_VERSION",
    "HEADER_SIZE",
    "RECORD_FRAME_SIZE",
    "MonitoringRecord",
    "PutStrategyKind",
    "PutStrategy",
    "StringRegistry",
    "BoundedRecordQueue",
    "BinarySink",
    "DrainReport",
    "drain_loop",
    "Violation",
    "VerificationReport",
    "RECORD_DTYPE",
    "read_trace_file",
    "verify_trace_file",
    "BaselineProbe",
    "BinaryWriterProbe",
]

DEFAULT_QUEUE_CAPACITY = 10_000
YIELD_SPIN_TRIES = 1024


def _gil_enabled() -> bool:
    check = getattr(sys, "_is_gil_enabled", None)
    return True if check is None else bool(check())


# With a GIL no other thread can free a slot while we spin, so the spin
# phase only delays the yield.
DEFAULT_SPIN_TRIES = 0 if _gil_enabled() else YIELD_SPIN_TRIES

MAGIC = b"OBMB"
FORMAT_VERSION = 1

TAG_REGISTRY = -1
TAG_TERMINATOR = 0
TAG_RECORD = 1

_HEADER = struct.Struct("<4sI")
_TAG = struct.Struct("<i")
_REGISTRY_HEAD = struct.Struct("<iiI")
_RECORD = struct.Struct("<iiqiqq")

HEADER_SIZE = _HEADER.size
RECORD_FRAME_SIZE = _RECORD.size


_GATE_BACKOFF_MIN_S = 20e-6
_GATE_BACKOFF_MAX_S = 1e-3


def _yield_cpu() -> None:
    os.sched_yield()


class MonitoringRecord(NamedTuple):
    """One monitored method activation."""

    signature_id: int
    trace_id: int
    order_index: int
    tin_ns: int
    tout_ns: int


class PutStrategyKind(enum.Enum):
    SINGLE_PRODUCER_BLOCKING = "sp"
    YIELD = "yield"


@dataclass(frozen=True)
class PutStrategy:
    variant: PutStrategyKind = PutStrategyKind.YIELD
    declared_producers: int = 1

    def __post_init__(self) -> None:
        if self.declared_producers < 1:
            raise ConfigError("declared_producers must be >= 1")

    @property
    def single_producer(self) -> bool:
        return self.variant is PutStrategyKind.SINGLE_PRODUCER_BLOCKING


class StringRegistry:
    """Dense, stable ids for signature strings, starting at 0."""

    def __init__(self) -> None:
        self._ids: dict[str, int] = {}

    def register(self, signature: str) -> int:
        if not signature:
            raise ConfigError("signature must be non-empty")
        ident = self._ids.get(signature)
        if ident is None:
            ident = len(self._ids)
            self._ids[signature] = ident
        return ident

    def items(self) -> list[tuple[int, str]]:
        return [(ident, text) for text, ident in self._ids.items()]

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, signature: object) -> bool:
        return signature in self._ids


class BoundedRecordQueue:
    """Fixed-capacity ring buffer with one consumer.

    A slot is free when it holds ``None``.  Producers may only write into a
    free slot, so ``enqueued - drained`` never exceeds ``capacity``.
    """

    def __init__(
        self,
        capacity: int = DEFAULT_QUEUE_CAPACITY,
        strategy: Optional[PutStrategy] = None,
        *,
        unsafe_allow_mismatch: bool = False,
        spin_tries: int = DEFAULT_SPIN_TRIES,
    ) -> None:
        if capacity < 1:
            raise ConfigError("queue capacity must be >= 1")
        strategy = strategy or PutStrategy()
        if (
            strategy.single_producer
            and strategy.declared_producers > 1
            and not unsafe_allow_mismatch
        ):
            raise ConfigError(
                "single-producer blocking strategy cannot serve "
                f"{strategy.declared_producers} producers; use the yield strategy"
            )
        if spin_tries < 0:
            raise ConfigError("spin_tries must be >= 0")
        self.capacity = capacity
        self.strategy = strategy
        self.spin_tries = spin_tries
        self._buf: list[Optional[MonitoringRecord]] = [None] * capacity
        self._tail = 0
        self._head = 0
        self._closed = False
        self._producer_lock = threading.Lock()
        self._waiter_gate = threading.Lock()
        self._not_full = threading.Event()
        self.enqueued = 0
        self.drained = 0
        self.yield_waits = 0
        self.max_occupancy = 0
        self.enqueue = self._put_sp if strategy.single_producer else self._put_yield

    @property
    def closed(self) -> bool:
        return self._closed

    @property
    def occupancy(self) -> int:
        return self.enqueued - self.drained

    def _put_yield(self, record: MonitoringRecord) -> None:
        buf = self._buf
        cap = self.capacity
        lock = self._producer_lock
        with lock:
            if self._closed:
                raise ClosedChannelError("queue is shut down")
            tail = self._tail
            slot = tail % cap
            if buf[slot] is None:
                buf[slot] = record
                self._tail = tail + 1
                self.enqueued += 1
                occupancy = tail + 1 - self._head
                if occupancy > self.max_occupancy:
                    self.max_occupancy = occupancy
                return
        # full: one producer at a time waits actively; the rest back off with
        # short sleeps, since a blocking acquire would wake one on every release
        gate = self._waiter_gate
        if not gate.acquire(False):
            pause = _GATE_BACKOFF_MIN_S
            while not gate.acquire(False):
                time.sleep(pause)
                pause = min(2 * pause, _GATE_BACKOFF_MAX_S)
        try:
            waits = 0
            while True:
                for _ in range(self.spin_tries):
                    if buf[self._tail % cap] is None:
                        break
                else:
                    waits += 1
                    _yield_cpu()
                with lock:
                    if self._closed:
                        raise ClosedChannelError("queue is shut down")
                    tail = self._tail
                    slot = tail % cap
                    if buf[slot] is None:
                        buf[slot] = record
                        self._tail = tail + 1
                        self.enqueued += 1
                        self.yield_waits += waits
                        occupancy = tail + 1 - self._head
                        if occupancy > self.max_occupancy:
                            self.max_occupancy = occupancy
                        return
        finally:
            gate.release()

    def _put_sp(self, record: MonitoringRecord) -> None:
        if self._closed:
            raise ClosedChannelError("queue is shut down")
        buf = self._buf
        # the producer index is owned by the (single) producer
        tail = self._tail
        slot = tail % self.capacity
        while buf[slot] is not None:
            self._not_full.clear()
            if buf[slot] is None:
                break
            self._not_full.wait(0.001)
            if self._closed:
                raise ClosedChannelError("queue is shut down")
        buf[slot] = record
        self._tail = tail + 1
        self.enqueued += 1
        occupancy = tail + 1 - self._head
        if occupancy > self.max_occupancy:
            self.max_occupancy = occupancy

    def poll(self) -> Optional[MonitoringRecord]:
        """Take the next record, or ``None`` if the head slot is empty.

        Must only be called from the single consumer.
        """
        head = self._head
        slot = head % self.capacity
        record = self._buf[slot]
        if record is None:
            return None
        self._buf[slot] = None
        self._head = head + 1
        self.drained += 1
        if not self._not_full.is_set():
            self._not_full.set()
        return record

    def drain_to(self, out: list, limit: int) -> int:
        """Move up to ``limit`` consecutive records into ``out``."""
        buf = self._buf
        cap = self.capacity
        head = self._head
        taken = 0
        while taken < limit:
            slot = head % cap
            record = buf[slot]
            if record is None:
                break
            buf[slot] = None
            out.append(record)
            head += 1
            taken += 1
        if taken:
            self._head = head
            self.drained += taken
            if not self._not_full.is_set():
                self._not_full.set()
        return taken

    def close(self) -> None:
        """Shutdown barrier: producers are done, no further enqueues."""
        with self._producer_lock:
            self._closed = True
        self._not_full.set()


@dataclass
class DrainReport:
    """Outcome of one consumer run.

    ``bytes`` counts header, registry and record frames; the terminator is
    not included.
    """

    records: int = 0
    bytes: int = 0
    valid: bool = True


class BinarySink:
    """Writes the trace file format; registry entries follow the header."""

    def __init__(self, path: os.PathLike | str, registry: Optional[StringRegistry] = None):
        self.path = Path(path)
        self.registry = registry or StringRegistry()
        self.bytes_written = 0
        self.records_written = 0
        self.invalid = False
        self._fh: Optional[BinaryIO] = None

    def open(self) -> "BinarySink":
        self._fh = open(self.path, "wb")
        chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION)]
        for ident, text in self.registry.items():
            raw = text.encode("utf-8")
            chunks.append(_REGISTRY_HEAD.pack(TAG_REGISTRY, ident, len(raw)))
            chunks.append(raw)
        self._write(b"".join(chunks))
        return self

    def _write(self, data: bytes) -> None:
        assert self._fh is not None, "sink not opened"
        try:
            self._fh.write(data)
        except OSError:
            self.abort()
            raise
        self.bytes_written += len(data)

    def write_records(self, records: list[MonitoringRecord]) -> None:
        pack = _RECORD.pack
        self._write(b"".join([pack(TAG_RECORD, *r) for r in records]))
        self.records_written += len(records)

    def finish(self) -> None:
        try:
            assert self._fh is not None, "sink not opened"
            self._fh.write(_TAG.pack(TAG_TERMINATOR))
            self._fh.close()
        except OSError:
            self.abort()
            raise
        self._fh = None

    def abort(self) -> None:
        """Close without terminator and flag the partial file by renaming it."""
        self.invalid = True
        if self._fh is not None:
            try:
                self._fh.close()
            except OSError:
                pass
            self._fh = None
        if self.path.exists():
            flagged = self.path.with_name(self.path.name + ".invalid")
            os.replace(self.path, flagged)
            self.path = flagged


def drain_loop(queue: BoundedRecordQueue, sink: BinarySink, batch: int = 4096) -> DrainReport:
    """Single consumer: serialize records in arrival order until shutdown.

    Records are buffered until ``batch`` are pending, so a tiny queue does
    not turn into one file write per record.
    """
    if sink._fh is None:
        sink.open()
    pending: list[MonitoringRecord] = []
    drain = queue.drain_to
    try:
        while True:
            closed = queue.closed
            if drain(pending, batch - len(pending)):
                if len(pending) >= batch:
                    sink.write_records(pending)
                    pending.clear()
            elif closed:
                # closed was observed before this empty poll, so nothing is in flight
                break
            else:
                _yield_cpu()
        if pending:
            sink.write_records(pending)
        sink.finish()
    except OSError:
        if not sink.invalid:
            sink.abort()
        raise
    return DrainReport(records=sink.records_written, bytes=sink.bytes_written, valid=True)


@dataclass(frozen=True)
class Violation:
    trace_id: int
    kind: str  # "gap", "duplicate", "depth", "order", "timestamps"
    detail: str


@dataclass
class VerificationReport:
    path: Path
    records: int = 0
    traces: int = 0
    registry: dict[int, str] = field(default_factory=dict)
    violations: list[Violation] = field(default_factory=list)
    unknown_signature_ids: set[int] = field(default_factory=set)

    @property
    def ok(self) -> bool:
        return not self.violations and not self.unknown_signature_ids

    def summary(self) -> str:
        kinds: dict[str, int] = {}
        for v in self.violations:
            kinds[v.kind] = kinds.get(v.kind, 0) + 1
        parts = [f"{self.records} records", f"{self.traces} traces"]
        parts += [f"{n} {k}" for k, n in sorted(kinds.items())]
        if self.unknown_signature_ids:
            parts.append(f"unknown ids {sorted(self.unknown_signature_ids)}")
        return ", ".join(parts)


RECORD_DTYPE = np.dtype(
    [
        ("tag", "<i4"),
        ("signature_id", "<i4"),
        ("trace_id", "<i8"),
        ("order_index", "<i4"),
        ("tin_ns", "<i8"),
        ("tout_ns", "<i8"),
    ]
)
assert RECORD_DTYPE.itemsize == _RECORD.size


def read_trace_file(path: os.PathLike | str) -> tuple[dict[int, str], np.ndarray]:
    """Parse a trace file into its registry and a structured record array.

    Records keep file order.  Runs of consecutive record frames are decoded
    in bulk; registry frames may appear anywhere before the terminator.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TraceFormatError(f"{path}: truncated header")
    magic, version = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TraceFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise TraceFormatError(f"{path}: unsupported version {version}")
    registry: dict[int, str] = {}
    chunks: list[np.ndarray] = []
    pos = _HEADER.size
    end = len(data)
    while True:
        if pos + _TAG.size > end:
            raise TraceFormatError(f"{path}: truncated at byte {pos} (no terminator)")
        (tag,) = _TAG.unpack_from(data, pos)
        if tag == TAG_RECORD:
            count = (end - pos) // RECORD_DTYPE.itemsize
            if count == 0:
                raise TraceFormatError(f"{path}: truncated record at byte {pos}")
            run = np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=pos)
            not_record = np.flatnonzero(run["tag"] != TAG_RECORD)
            if len(not_record):
                run = run[: not_record[0]]
            chunks.append(run)
            pos += len(run) * RECORD_DTYPE.itemsize
        elif tag == TAG_REGISTRY:
            if pos + _REGISTRY_HEAD.size > end:
                raise TraceFormatError(f"{path}: truncated registry entry at byte {pos}")
            _, ident, length = _REGISTRY_HEAD.unpack_from(data, pos)
            pos += _REGISTRY_HEAD.size
            if pos + length > end:
                raise TraceFormatError(f"{path}: truncated registry text at byte {pos}")
            registry[ident] = data[pos:pos + length].decode("utf-8")
            pos += length
        elif tag == TAG_TERMINATOR:
            break
        else:
            raise TraceFormatError(f"{path}: unknown frame tag {tag} at byte {pos}")
    records = np.concatenate(chunks) if chunks else np.empty(0, dtype=RECORD_DTYPE)
    return registry, records


def verify_trace_file(
    path: os.PathLike | str, expected_depth: Optional[int] = None
) -> VerificationReport:
    """Check per-trace completeness and ordering of a trace file.

    Within a trace the order indices must be exactly ``0..k-1`` (``k`` is
    ``expected_depth`` when given).  Records are emitted when an activation
    exits, so the deepest level arrives first: arrival order within a trace
    must be strictly decreasing.
    """
    registry, records = read_trace_file(path)
    report = VerificationReport(path=Path(path), records=len(records), registry=registry)
    if not len(records):
        return report
    sig = records["signature_id"]
    known = np.fromiter(registry, dtype=np.int64, count=len(registry))
    report.unknown_signature_ids = {int(i) for i in np.setdiff1d(np.unique(sig), known)}

    trace = records["trace_id"]
    order = records["order_index"].astype(np.int64)
    for i in np.flatnonzero(records["tout_ns"] < records["tin_ns"]):
        report.violations.append(
            Violation(int(trace[i]), "timestamps", f"order {int(order[i])}: tout < tin")
        )

    # stable sort keeps arrival order inside each trace
    by_trace = np.argsort(trace, kind="stable")
    t = trace[by_trace]
    o = order[by_trace]
    starts = np.flatnonzero(np.r_[True, t[1:] != t[:-1]])
    report.traces = len(starts)
    counts = np.diff(np.r_[starts, len(t)])
    same_trace = t[1:] == t[:-1]

    bad_order = same_trace & (o[1:] >= o[:-1])
    # (trace, order) sort: boundaries between traces match ``starts``
    lex = np.lexsort((o, t))
    ts, ol = t[lex], o[lex]
    dup = (ts[1:] == ts[:-1]) & (ol[1:] == ol[:-1])
    n_distinct = np.add.reduceat(np.r_[True, ~dup].astype(np.int64), starts)
    minima = np.minimum.reduceat(o, starts)
    expected = np.maximum.reduceat(o, starts) + 1
    if expected_depth is not None:
        expected = np.maximum(expected, expected_depth)
    incomplete = (n_distinct != expected) | (minima < 0) | (n_distinct != counts)

    suspicious = {int(x) for x in t[1:][bad_order]}
    suspicious.update(int(x) for x in t[starts][incomplete])

    index = dict(zip(t[starts].tolist(), range(len(starts))))
    for trace_id in sorted(suspicious):
        k = index[trace_id]
        seen = o[starts[k]:starts[k] + counts[k]].tolist()
        distinct_seen = set(seen)
        if len(distinct_seen) != len(seen):
            report.violations.append(Violation(trace_id, "duplicate", f"indices {sorted(seen)}"))
        top = int(expected[k])
        missing = sorted(set(range(top)) - distinct_seen)
        if missing:
            report.violations.append(Violation(trace_id, "gap", f"missing {missing}"))
        extra = sorted(i for i in distinct_seen if i < 0 or i >= top)
        if extra or (expected_depth is not None and len(distinct_seen) > expected_depth):
            report.violations.append(
                Violation(trace_id, "depth", f"{len(distinct_seen)} levels, out of range {extra}")
            )
        if any(a <= b for a, b in zip(seen, seen[1:])):
            report.violations.append(Violation(trace_id, "order", f"arrival {seen}"))
    return report


class BaselineProbe:
    """No-op probe: hooks fire but nothing is recorded or enqueued."""

    emits_records = False

    def __init__(self) -> None:
        self.hook_calls = 0
        self.records_emitted = 0

    def before(self, order_index: int) -> int:
        self.hook_calls += 1
        return order_index

    def after(self, token: int) -> None:
        self.hook_calls += 1


class BinaryWriterProbe:
    """Per-worker probe handle that turns every activation into a record.

    ``trace_ids`` is shared between the handles of one loop start so trace
    ids stay unique across workers.
    """

    emits_records = True

    def __init__(
        self,
        queue: BoundedRecordQueue,
        signature_id: int,
        trace_ids: Optional[Iterator[int]] = None,
    ) -> None:
        self.queue = queue
        self.signature_id = signature_id
        self.trace_ids = trace_ids if trace_ids is not None else itertools.count()
        self.hook_calls = 0
        self.records_emitted = 0
        self._trace_id = -1
        self._clock = time.perf_counter_ns

    def before(self, order_index: int) -> tuple[int, int]:
        self.hook_calls += 1
        if order_index == 0:
            self._trace_id = next(self.trace_ids)
        return order_index, self._clock()

    def after(self, token: tuple[int, int]) -> None:
        tout = self._clock()
        self.hook_calls += 1
        self.queue.enqueue(
            MonitoringRecord(self.signature_id, self._trace_id, token[0], token[1], tout)
        )
        self.records_emitted += 1
