"""Append-only run history and github-action-benchmark export.

The history file is UTF-8 JSON::

    {"schema_version": 1,
     "entries": [{"commit_id": ..., "timestamp": ..., "environment": {...},
                  "benchmarks": [{"name", "unit", "value", "range", "extra"}]}]}

Benchmarks use the ``customSmallerIsBetter`` shape of github-action-benchmark.
``extra`` carries the config digest, the minimal detectable change and the
per-loop means so statistical regression checks work from the history alone.
"""

from __future__ import annotations

import json
import logging
import os
import re
import subprocess
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

from .errors import ConfigError, HistoryLockError, SchemaError
from .runner import BenchmarkRun
from .stats import MdeConfig, StatsSummary, detect_change, minimal_detectable_change, summarize_run

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
UNIT = "ns/call"
GAB_KEYS = ("name", "unit", "value", "range", "extra")

_RANGE = re.compile(r"^±(\d+(?:\.\d+)?)%$")


def format_range(rel_stddev: float) -> str:
    return f"±{100.0 * rel_stddev:.2f}%"


def parse_range(text: str) -> float:
    """``"±0.11%"`` -> 0.11 (percent)."""
    match = _RANGE.match(text)
    if match is None:
        raise ValueError(f"not a range: {text!r}")
    return float(match.group(1))


def format_extra(config_digest: str, n: int, mde_pct: float, loop_means: Sequence[float]) -> str:
    means = ",".join(f"{m:.4f}" for m in loop_means)
    return f"cfg={config_digest};n={n};mde={mde_pct:.4f}%;loop_means={means}"


def parse_extra(text: str) -> dict[str, str]:
    fields: dict[str, str] = {}
    for part in (text or "").split(";"):
        key, sep, value = part.partition("=")
        if sep:
            fields[key.strip()] = value.strip()
    return fields


def loop_means_from_extra(text: str) -> Optional[list[float]]:
    raw = parse_extra(text).get("loop_means")
    if not raw:
        return None
    try:
        return [float(x) for x in raw.split(",")]
    except ValueError:
        return None


def gab_benchmark(
    name: str,
    summary: StatsSummary,
    extra: str = "",
) -> dict[str, object]:
    return {
        "name": name,
        "unit": UNIT,
        "value": summary.mean_ns,
        "range": format_range(summary.rel_stddev),
        "extra": extra,
    }


def _runs(runs: Union[BenchmarkRun, Sequence[BenchmarkRun]]) -> list[BenchmarkRun]:
    return [runs] if isinstance(runs, BenchmarkRun) else list(runs)


def export_gab_json(runs: Union[BenchmarkRun, Sequence[BenchmarkRun]]) -> list[dict[str, object]]:
    """One benchmark object per run, in github-action-benchmark form.

    ``value`` is the mean ns/call after warmup removal, ``range`` the
    relative standard deviation of the per-loop means.
    """
    out = []
    for run in _runs(runs):
        summary = summarize_run(run)
        n = run.config.loops
        mde = minimal_detectable_change(summary.per_loop.rel_stddev, MdeConfig(n=n))
        extra = format_extra(run.config.digest(), n, 100.0 * mde, summary.loop_means)
        out.append(gab_benchmark(run.name, summary.per_loop, extra))
    names = [b["name"] for b in out]
    if len(set(names)) != len(names):
        raise ConfigError(f"benchmark names must be unique: {names}")
    return out


def ingest_gab_json(document: Union[str, list]) -> list[dict[str, object]]:
    """Parse exported benchmarks back; ``range`` becomes ``rel_stddev_pct``."""
    data = json.loads(document) if isinstance(document, str) else document
    if not isinstance(data, list):
        raise SchemaError("github-action-benchmark input must be a JSON array")
    parsed = []
    for item in data:
        missing = [k for k in ("name", "unit", "value") if k not in item]
        if missing:
            raise SchemaError(f"benchmark entry lacks {missing}")
        parsed.append({
            "name": item["name"],
            "unit": item["unit"],
            "value": float(item["value"]),
            "range": item.get("range"),
            "rel_stddev_pct": parse_range(item["range"]) if item.get("range") else None,
            "extra": item.get("extra", ""),
        })
    return parsed


# -- history file --------------------------------------------------------

@dataclass
class HistoryEntry:
    commit_id: str
    timestamp: str
    environment: dict
    benchmarks: list[dict]

    @property
    def environment_digest(self) -> str:
        return self.environment.get("digest", "")

    def benchmark(self, name: str) -> Optional[dict]:
        for bench in self.benchmarks:
            if bench["name"] == name:
                return bench
        return None

    def to_dict(self) -> dict:
        return {
            "commit_id": self.commit_id,
            "timestamp": self.timestamp,
            "environment": self.environment,
            "benchmarks": self.benchmarks,
        }


@dataclass
class HistoryFile:
    entries: list[HistoryEntry] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "entries": [e.to_dict() for e in self.entries],
        }


def load_history(path: os.PathLike | str) -> HistoryFile:
    path = Path(path)
    if not path.exists() or path.stat().st_size == 0:
        return HistoryFile()
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{path}: history schema {version!r}, expected {SCHEMA_VERSION}")
    return HistoryFile(entries=[HistoryEntry(**e) for e in data.get("entries", [])])


@contextmanager
def _writer_lock(path: Path) -> Iterator[None]:
    lock = path.with_name(path.name + ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise HistoryLockError(f"{lock} exists; another writer is active") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.unlink(lock)


def detect_commit_id() -> str:
    sha = os.environ.get("GITHUB_SHA")
    if sha:
        return sha
    try:
        proc = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                              text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return proc.stdout.strip() if proc.returncode == 0 and proc.stdout.strip() else "unknown"


def make_entry(
    runs: Union[BenchmarkRun, Sequence[BenchmarkRun]], commit_id: Optional[str] = None
) -> HistoryEntry:
    runs = _runs(runs)
    if not runs:
        raise ConfigError("no runs to record")
    env = runs[0].environment
    if any(r.environment.digest() != env.digest() for r in runs):
        raise ConfigError("runs of one history entry must share an environment")
    environment = env.to_dict()
    environment["digest"] = env.digest()
    return HistoryEntry(
        commit_id=commit_id or detect_commit_id(),
        timestamp=max(r.started_at for r in runs).isoformat(),
        environment=environment,
        benchmarks=export_gab_json(runs),
    )


def append_entry(path: os.PathLike | str, entry: HistoryEntry) -> HistoryFile:
    """Append under the writer lock, then atomically replace the file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _writer_lock(path):
        history = load_history(path)
        if history.entries:
            last = datetime.fromisoformat(history.entries[-1].timestamp)
            if datetime.fromisoformat(entry.timestamp) < last:
                raise ConfigError("history timestamps must be non-decreasing")
        history.entries.append(entry)
        fd, tmp = tempfile.mkstemp(prefix=path.name, suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(history.to_dict(), fh, indent=1)
                fh.write("\n")
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    return history


def append_run(
    path: os.PathLike | str,
    runs: Union[BenchmarkRun, Sequence[BenchmarkRun]],
    commit_id: Optional[str] = None,
) -> HistoryFile:
    return append_entry(path, make_entry(runs, commit_id))


# -- regression checks ---------------------------------------------------

@dataclass(frozen=True)
class RatioPolicy:
    threshold: float = 2.0


@dataclass(frozen=True)
class StatisticalPolicy:
    alpha: float = 0.01
    fallback_threshold: float = 2.0


@dataclass(frozen=True)
class Alert:
    name: str
    previous_commit: str
    latest_commit: str
    previous_value: float
    latest_value: float
    ratio: float
    mode: str
    p_value: Optional[float] = None
    exceeds_mde: Optional[bool] = None

    def describe(self) -> str:
        text = (f"{self.name}: {self.previous_value:.2f} -> {self.latest_value:.2f} ns/call "
                f"(x{self.ratio:.3f}, {self.mode}")
        if self.p_value is not None:
            text += f", p={self.p_value:.3g}"
        if self.exceeds_mde is not None:
            text += ", above" if self.exceeds_mde else ", below"
            text += " detectable change"
        return text + ")"


def _previous_comparable(entries: list[HistoryEntry], name: str) -> Optional[HistoryEntry]:
    latest = entries[-1]
    for entry in reversed(entries[:-1]):
        if entry.environment_digest == latest.environment_digest and entry.benchmark(name):
            return entry
    return None


def check_regression(
    history: Union[HistoryFile, os.PathLike, str],
    policy: Union[RatioPolicy, StatisticalPolicy, None] = None,
) -> list[Alert]:
    """Compare the latest entry with the previous one from the same environment."""
    if not isinstance(history, HistoryFile):
        history = load_history(history)
    policy = policy or RatioPolicy()
    entries = history.entries
    if len(entries) < 2:
        return []
    latest = entries[-1]
    alerts = []
    for bench in latest.benchmarks:
        name = bench["name"]
        prev_entry = _previous_comparable(entries, name)
        if prev_entry is None:
            continue
        prev = prev_entry.benchmark(name)
        ratio = bench["value"] / prev["value"]
        common = dict(
            name=name,
            previous_commit=prev_entry.commit_id,
            latest_commit=latest.commit_id,
            previous_value=prev["value"],
            latest_value=bench["value"],
            ratio=ratio,
        )
        if isinstance(policy, StatisticalPolicy):
            a = loop_means_from_extra(prev.get("extra", ""))
            b = loop_means_from_extra(bench.get("extra", ""))
            if a is not None and b is not None and len(a) >= 2 and len(b) >= 2:
                decision = detect_change(a, b, policy.alpha)
                if decision.changed and decision.relative_change > 0:
                    mde = parse_extra(prev.get("extra", "")).get("mde", "").rstrip("%")
                    exceeds = (100.0 * decision.relative_change >= float(mde)) if mde else None
                    alerts.append(Alert(mode="statistical", p_value=decision.p_value,
                                        exceeds_mde=exceeds, **common))
                continue
            log.warning("%s: no per-loop means stored, falling back to ratio %.2f",
                        name, policy.fallback_threshold)
            threshold = policy.fallback_threshold
        else:
            threshold = policy.threshold
        if ratio > threshold:
            alerts.append(Alert(mode="ratio", **common))
    return alerts
