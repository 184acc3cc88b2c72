import csv
import json
import subprocess
import sys

import pytest

from overbench.cli import SWEEP_CSV_HEADER, main
from overbench.runner import ProbeKind, save_run
from overbench.stats import minimal_detectable_change

from conftest import noisy_means, synthetic_run

SMALL = ["--loops", "2", "--calls", "200", "--depth", "5"]


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_run_baseline_table(capsys, tmp_path):
    code, out, _ = run_cli(capsys, "run", "--probe", "baseline", "--loops", "2", "--calls", "1000",
                           "--output-dir", tmp_path)
    assert code == 0
    rows = [line for line in out.splitlines() if line.startswith("Baseline")]
    assert len(rows) == 1
    assert "checksum: " + str(2 * 1000 * 55) in out
    assert len(list(tmp_path.glob("run-*.json"))) == 1


def test_run_sp_with_workers_is_usage_error(capsys, tmp_path):
    code, _, err = run_cli(capsys, "run", "--workers", "2", "--put-strategy", "sp",
                           "--output-dir", tmp_path)
    assert code == 2
    assert "single-producer" in err


@pytest.mark.parametrize("argv", [["mde"], ["bogus"], ["run", "--loops", "x"]])
def test_usage_errors(capsys, tmp_path, argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 2
    capsys.readouterr()


def test_loops_below_two(capsys, tmp_path):
    code, _, _ = run_cli(capsys, "run", "--loops", "1", "--output-dir", tmp_path)
    assert code == 2


def test_run_then_verify(capsys, tmp_path):
    code, out, _ = run_cli(capsys, "run", "--probe", "binary-writer", *SMALL,
                           "--output-dir", tmp_path, "--json")
    assert code == 0
    payload = json.loads(out)
    traces = payload["runs"][0]["trace_files"]
    assert len(traces) == 2
    code, out, _ = run_cli(capsys, "verify", "--depth", "5", *traces)
    assert code == 0
    assert out.count(": ok") == 2


def test_verify_detects_corruption(capsys, tmp_path):
    run_cli(capsys, "run", "--probe", "binary-writer", *SMALL, "--output-dir", tmp_path)
    trace = sorted(tmp_path.glob("traces-*/loop-000.obmb"))[0]
    data = bytearray(trace.read_bytes())
    # drop the last record before the terminator
    del data[-40:-4]
    trace.write_bytes(bytes(data))
    code, out, _ = run_cli(capsys, "verify", "--depth", "5", trace)
    assert code == 3 and "INVALID" in out
    trace.write_bytes(b"junk")
    code, _, err = run_cli(capsys, "verify", trace)
    assert code == 3 and "truncated" in err


def test_json_output_is_clean(capsys, tmp_path):
    code, out, err = run_cli(capsys, "run", *SMALL, "--output-dir", tmp_path, "--json")
    assert code == 0
    payload = json.loads(out)
    assert payload["runs"][0]["name"] == "Baseline"
    assert "Baseline" in err


def test_history_append(capsys, tmp_path):
    history = tmp_path / "h.json"
    for _ in range(2):
        code, _, _ = run_cli(capsys, "run", "--probe", "both", *SMALL, "--output-dir", tmp_path,
                             "--history", history, "--commit", "deadbeef")
        assert code == 0
    data = json.loads(history.read_text())
    assert len(data["entries"]) == 2
    assert [b["name"] for b in data["entries"][0]["benchmarks"]] == ["Baseline", "Binary Writer"]


class TestSweep:
    def test_csv(self, capsys, tmp_path):
        csv_path = tmp_path / "sweep.csv"
        code, _, _ = run_cli(capsys, "sweep", "--workers-list", "1,2", *SMALL,
                             "--output-dir", tmp_path, "--csv", csv_path)
        assert code == 0
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "workers,probe,mean_ns,stddev_ns,rel_stddev"
        rows = list(csv.DictReader(lines))
        assert [(r["workers"], r["probe"]) for r in rows] == [
            ("1", "baseline"), ("2", "baseline"), ("1", "binary-writer"), ("2", "binary-writer")]
        assert all(float(r["mean_ns"]) > 0 for r in rows)

    def test_header_constant(self):
        assert ",".join(SWEEP_CSV_HEADER) == "workers,probe,mean_ns,stddev_ns,rel_stddev"

    def test_sp_rejected(self, capsys, tmp_path):
        code, _, _ = run_cli(capsys, "sweep", "--workers-list", "1,2", "--put-strategy", "sp",
                             *SMALL, "--output-dir", tmp_path)
        assert code == 2
        assert not list(tmp_path.glob("*.csv"))

    def test_partial_on_failure(self, capsys, tmp_path, monkeypatch):
        from overbench import runner
        from overbench.errors import WorkerError

        real = runner.run_benchmark

        def limited(cfg, **kw):
            if cfg.workers >= 2:
                raise WorkerError("process cancelled")
            return real(cfg, **kw)

        monkeypatch.setattr(runner, "run_benchmark", limited)
        csv_path = tmp_path / "sweep.csv"
        code, _, _ = run_cli(capsys, "sweep", "--workers-list", "1,2", "--probe", "baseline",
                             *SMALL, "--output-dir", tmp_path, "--csv", csv_path)
        assert code == 3
        assert len(csv_path.read_text().splitlines()) == 2


class TestCompare:
    def files(self, tmp_path, rng, shift=0.0, **kw):
        sigma = 0.01
        base = noisy_means(rng, 1000, sigma)
        delta = minimal_detectable_change(sigma)
        a = synthetic_run(base, output_dir=tmp_path)
        b = synthetic_run([m * (1 + shift * delta) for m in base], output_dir=tmp_path, **kw)
        return save_run(a, tmp_path / "a"), save_run(b, tmp_path / "b")

    def test_identical(self, capsys, tmp_path, rng):
        a, b = self.files(tmp_path, rng)
        assert run_cli(capsys, "compare", a, b)[0] == 0

    def test_shifted(self, capsys, tmp_path, rng):
        a, _ = self.files(tmp_path, rng)
        sigma = 0.01
        shifted = noisy_means(rng, 1000 * (1 + 3 * minimal_detectable_change(sigma)), sigma)
        b = save_run(synthetic_run(shifted, output_dir=tmp_path), tmp_path / "c")
        code, out, _ = run_cli(capsys, "compare", a, b)
        assert code == 1 and "changed" in out

    def test_mismatched(self, capsys, tmp_path, rng):
        a, b = self.files(tmp_path, rng, probe=ProbeKind.BINARY_WRITER)
        assert run_cli(capsys, "compare", a, b)[0] == 2

    def test_json(self, capsys, tmp_path, rng):
        a, b = self.files(tmp_path, rng)
        code, out, _ = run_cli(capsys, "compare", a, b, "--json")
        assert json.loads(out)["changed"] is False


class TestMde:
    def test_table_row(self, capsys):
        assert run_cli(capsys, "mde", "--sigma", "1.97", "--n", "10")[1].strip() == "4.41"

    def test_zero(self, capsys):
        assert run_cli(capsys, "mde", "--sigma", "0")[1].strip() == "0.00"

    def test_power(self, capsys):
        out = run_cli(capsys, "mde", "--sigma", "1", "--mode", "power", "--alpha", "0.01",
                      "--beta", "0.01", "--n", "10")[1]
        assert out.strip() == "2.19"

    def test_json(self, capsys):
        payload = json.loads(run_cli(capsys, "mde", "--sigma", "4.15", "--json")[1])
        assert round(payload["delta_pct"], 2) == 9.28


def test_export(capsys, tmp_path):
    path = save_run(synthetic_run([100, 102, 98]), tmp_path)
    code, out, _ = run_cli(capsys, "export", path)
    assert code == 0
    doc = json.loads(out)
    assert len(doc) == 1 and set(doc[0]) == {"name", "unit", "value", "range", "extra"}
    target = tmp_path / "gab.json"
    assert run_cli(capsys, "export", path, "-o", target)[0] == 0
    assert json.loads(target.read_text()) == doc


def test_analyze(capsys, tmp_path, later):
    from overbench.history import append_run

    history = tmp_path / "h.json"
    append_run(history, synthetic_run([100, 100], started_at=later(0)), commit_id="a")
    code, out, _ = run_cli(capsys, "analyze", "--history", history)
    assert code == 0 and "no regression" in out
    append_run(history, synthetic_run([250, 250], started_at=later(1)), commit_id="b")
    code, out, _ = run_cli(capsys, "analyze", "--history", history)
    assert code == 1 and "REGRESSION" in out
    path = save_run(synthetic_run([100, 102, 98]), tmp_path)
    code, out, _ = run_cli(capsys, "analyze", path)
    assert code == 0 and "Baseline" in out


def test_config_file_and_env(capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "overbench.toml").write_text(
        'loops = 3\ncalls = 50\ndepth = 4\noutput-dir = "from-file"\n')
    code, out, _ = run_cli(capsys, "run", "--json")
    assert code == 0
    row = json.loads(out)["runs"][0]
    assert row["loops"] == 3
    assert (tmp_path / "from-file").is_dir()
    monkeypatch.setenv("OVERBENCH_OUT", str(tmp_path / "from-env"))
    run_cli(capsys, "run")
    assert list((tmp_path / "from-env").glob("run-*.json"))
    run_cli(capsys, "run", "--output-dir", tmp_path / "from-flag")
    assert list((tmp_path / "from-flag").glob("run-*.json"))


def test_bad_config_file(capsys, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("nonsense = 1\n")
    assert run_cli(capsys, "mde", "--sigma", "1", "--config", bad)[0] == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "overbench", "mde", "--sigma", "1.97"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 0 and proc.stdout.strip() == "4.41"


def test_unsafe_mismatch_caught_by_verification(capsys, tmp_path):
    codes = set()
    for _ in range(10):
        code, _, err = run_cli(capsys, "run", "--workers", "2", "--put-strategy", "sp",
                               "--unsafe-allow-mismatch", "--probe", "binary-writer",
                               "--loops", "2", "--calls", "100", "--capacity", "16",
                               "--output-dir", tmp_path)
        codes.add(code)
        if code == 3:
            assert "failed verification" in err
            break
    assert 3 in codes
    assert not list(tmp_path.glob("run-*.json"))
