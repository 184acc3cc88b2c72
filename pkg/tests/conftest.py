from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from overbench.runner import (
    BenchmarkRun,
    EnvironmentDescriptor,
    LoopStartResult,
    ProbeKind,
    RunConfig,
)

ENV = EnvironmentDescriptor(
    hostname="bench-host", os_name="Linux", os_version="6.1", cpu_model="Test CPU",
    logical_cpus=4, memory_bound_bytes=2 * 1024**3, clock_resolution_ns=30.0,
)
T0 = datetime(2024, 5, 1, 12, 0, tzinfo=timezone.utc)


def synthetic_run(loop_means, calls=4, probe=ProbeKind.BASELINE, env=ENV,
                  started_at=T0, workers=1, output_dir="out"):
    """Run whose loop starts have constant durations equal to ``loop_means``.

    Warmup is 0.5, so each loop carries a leading half of elevated samples
    that must be discarded.
    """
    cfg = RunConfig(loops=len(loop_means), calls_per_loop=calls, workers=workers,
                    probe_kind=probe, output_dir=output_dir)
    loops = []
    for i, m in enumerate(loop_means):
        n = calls * workers
        durations = [2.0 * m] * (n // 2) + [float(m)] * (n - n // 2)
        loops.append(LoopStartResult(loop_index=i, durations=durations))
    return BenchmarkRun(cfg, loops, env, started_at, checksum_fold=0)


def noisy_means(rng, mean, rel_sigma, n=10):
    return list(mean * (1 + rng.normal(0, rel_sigma, n)))


@pytest.fixture
def make_run():
    return synthetic_run


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.fixture
def later():
    return lambda minutes: T0 + timedelta(minutes=minutes)
