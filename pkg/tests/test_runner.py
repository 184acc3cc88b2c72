import dataclasses

import pytest

from overbench import runner as runner_mod
from overbench.errors import ConfigError, IntegrityError, SweepAborted, WorkerError
from overbench.probe import PutStrategyKind, VerificationReport, Violation, verify_trace_file
from overbench.runner import (
    ProbeKind,
    RunConfig,
    capture_environment,
    load_run,
    run_benchmark,
    run_thread_sweep,
)
from overbench.workload import WorkloadConfig


@pytest.fixture
def small(tmp_path):
    return RunConfig(loops=2, calls_per_loop=100, workload=WorkloadConfig(10),
                     output_dir=tmp_path, queue_capacity=64)


def test_baseline_counts(small, tmp_path):
    run = run_benchmark(small)
    assert len(run.loop_results) == 2
    assert all(len(lr.durations) == 100 for lr in run.loop_results)
    assert all(lr.trace_path is None and lr.drain_report is None for lr in run.loop_results)
    assert not list(tmp_path.glob("traces-*"))
    assert run.checksum_fold == 2 * 100 * 55


def test_binary_writer_trace_files(small):
    run = run_benchmark(dataclasses.replace(small, probe_kind=ProbeKind.BINARY_WRITER))
    paths = [lr.trace_path for lr in run.loop_results]
    assert len(set(paths)) == 2
    for lr in run.loop_results:
        v = verify_trace_file(lr.trace_path, 10)
        assert v.ok and v.records == 1000
        assert lr.drain_report.records == 1000
        # fresh queue per loop start: counters only cover that loop
        assert lr.queue_stats["enqueued"] == lr.queue_stats["drained"] == 1000


def test_traces_removed_when_not_kept(small, tmp_path):
    cfg = dataclasses.replace(small, probe_kind=ProbeKind.BINARY_WRITER, keep_traces=False)
    run = run_benchmark(cfg)
    assert all(lr.trace_path is None for lr in run.loop_results)
    assert not list(tmp_path.glob("traces-*"))


@pytest.mark.parametrize("workers", [2, 3])
def test_parallel_duration_accounting(small, workers):
    cfg = dataclasses.replace(small, workers=workers, probe_kind=ProbeKind.BINARY_WRITER)
    run = run_benchmark(cfg)
    for lr in run.loop_results:
        assert len(lr.durations) == 100 * workers
        assert verify_trace_file(lr.trace_path, 10).records == 1000 * workers


@pytest.mark.parametrize("kwargs", [
    dict(workers=2, put_strategy=PutStrategyKind.SINGLE_PRODUCER_BLOCKING),
    dict(loops=1),
    dict(calls_per_loop=0),
    dict(warmup_fraction=1.0),
    dict(workers=0),
    dict(queue_capacity=0),
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        RunConfig(**kwargs)


def test_config_round_trip(small):
    cfg = dataclasses.replace(small, probe_kind=ProbeKind.BINARY_WRITER, spawn=True)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    other_dir = dataclasses.replace(cfg, output_dir="elsewhere")
    assert other_dir.comparable_key() == cfg.comparable_key()
    assert dataclasses.replace(cfg, loops=3).digest() != cfg.digest()


def test_run_file_round_trip(small):
    run = run_benchmark(small)
    assert run.path.name.startswith("run-") and run.path.suffix == ".json"
    loaded = load_run(run.path)
    assert loaded.config == run.config
    assert [lr.durations for lr in loaded.loop_results] == [lr.durations for lr in run.loop_results]
    assert loaded.environment == run.environment
    assert loaded.started_at == run.started_at


def test_run_files_never_overwritten(small):
    a = run_benchmark(small)
    b = run_benchmark(small)
    assert a.path != b.path and a.path.exists() and b.path.exists()


def test_spawn_mode(small):
    cfg = dataclasses.replace(small, spawn=True, probe_kind=ProbeKind.BINARY_WRITER,
                              calls_per_loop=50)
    run = run_benchmark(cfg)
    assert [len(lr.durations) for lr in run.loop_results] == [50, 50]
    assert all(verify_trace_file(lr.trace_path, 10).records == 500 for lr in run.loop_results)


def test_worker_failure_discards_run(small, tmp_path, monkeypatch):
    calls = {"n": 0}
    real = runner_mod.execute_monitored_call

    def flaky(cfg, probe):
        calls["n"] += 1
        if calls["n"] == 150:
            raise RuntimeError("boom")
        return real(cfg, probe)

    monkeypatch.setattr(runner_mod, "execute_monitored_call", flaky)
    with pytest.raises(WorkerError):
        run_benchmark(dataclasses.replace(small, workers=2))
    assert not list(tmp_path.glob("run-*.json"))


def test_integrity_failure_aborts(small, tmp_path, monkeypatch):
    def broken(path, depth=None):
        report = VerificationReport(path=path, records=999)
        report.violations.append(Violation(0, "gap", "missing [3]"))
        return report

    monkeypatch.setattr(runner_mod, "verify_trace_file", broken)
    with pytest.raises(IntegrityError):
        run_benchmark(dataclasses.replace(small, probe_kind=ProbeKind.BINARY_WRITER))
    assert not list(tmp_path.glob("run-*.json"))


class TestSweep:
    def test_worker_counts(self, small):
        runs = run_thread_sweep(small, [1, 2, 4])
        assert [r.config.workers for r in runs] == [1, 2, 4]
        for run in runs:
            total = sum(len(lr.durations) for lr in run.loop_results)
            assert total == run.config.loops * run.config.calls_per_loop * run.config.workers

    def test_empty(self, small):
        with pytest.raises(ConfigError):
            run_thread_sweep(small, [])

    def test_nonpositive(self, small):
        with pytest.raises(ConfigError):
            run_thread_sweep(small, [1, 0])

    def test_sp_base_rejected_before_running(self, small, tmp_path):
        base = dataclasses.replace(small, put_strategy=PutStrategyKind.SINGLE_PRODUCER_BLOCKING)
        with pytest.raises(ConfigError):
            run_thread_sweep(base, [1, 2])
        assert not list(tmp_path.glob("run-*.json"))

    def test_partial_results_persisted(self, small, tmp_path, monkeypatch):
        real = runner_mod.run_benchmark

        def limited(cfg, **kw):
            if cfg.workers >= 4:
                raise WorkerError("cancelled")
            return real(cfg, **kw)

        monkeypatch.setattr(runner_mod, "run_benchmark", limited)
        with pytest.raises(SweepAborted) as info:
            run_thread_sweep(small, [1, 2, 4])
        assert [r.config.workers for r in info.value.completed] == [1, 2]
        assert len(list(tmp_path.glob("run-*.json"))) == 2

    def test_large_sweep_counts(self, small):
        cfg = dataclasses.replace(small, calls_per_loop=20, probe_kind=ProbeKind.BINARY_WRITER)
        runs = run_thread_sweep(cfg, [2, 4, 8, 12])
        assert [r.config.workers for r in runs] == [2, 4, 8, 12]


class TestEnvironment:
    def test_fields(self):
        env = capture_environment()
        assert env.logical_cpus >= 1
        assert env.clock_resolution_ns > 0
        assert env.hostname and env.cpu_model

    def test_stable(self):
        a, b = capture_environment(), capture_environment()
        assert a.cpu_model == b.cpu_model
        assert a.digest() == b.digest()
