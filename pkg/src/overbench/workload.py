"""The monitored workload: a method that recurses into itself.

Almost all of its cost is the probe, so the measured per-call duration is
dominated by observability overhead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Any, NamedTuple, Protocol

from .errors import ConfigError

DEFAULT_DEPTH = 10
DEFAULT_SIGNATURE = "overbench.workload.monitoredMethod(int)"


class ProbeHandle(Protocol):
    emits_records: bool

    def before(self, order_index: int) -> Any: ...

    def after(self, token: Any) -> None: ...


@dataclass(frozen=True)
class WorkloadConfig:
    recursion_depth: int = DEFAULT_DEPTH
    spin_ns: int = 0
    signature: str = DEFAULT_SIGNATURE

    def __post_init__(self) -> None:
        if self.recursion_depth < 1:
            raise ConfigError("recursion_depth must be >= 1")
        if self.spin_ns < 0:
            raise ConfigError("spin_ns must be >= 0")
        if not self.signature:
            raise ConfigError("signature must be non-empty")


class CallOutcome(NamedTuple):
    checksum: int
    duration_ns: int


def expected_checksum(depth: int) -> int:
    return depth * (depth + 1) // 2


def busy_wait(ns: int, clock=time.perf_counter_ns) -> None:
    """Spin on the monotonic clock; never sleeps."""
    end = clock() + ns
    while clock() < end:
        pass


def _monitored_method(level: int, depth: int, spin_ns: int, probe: ProbeHandle) -> int:
    token = probe.before(level - 1)
    try:
        if spin_ns:
            busy_wait(spin_ns)
        if level < depth:
            return level + _monitored_method(level + 1, depth, spin_ns, probe)
        return level
    finally:
        probe.after(token)


def execute_monitored_call(cfg: WorkloadConfig, probe: ProbeHandle) -> CallOutcome:
    clock = time.perf_counter_ns
    start = clock()
    checksum = _monitored_method(1, cfg.recursion_depth, cfg.spin_ns, probe)
    return CallOutcome(checksum, clock() - start)
