"""Command-line entry point.

Exit codes: 0 success / no change, 1 change or regression detected,
2 usage or validation error, 3 integrity or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Sequence

from .config import load_config
from .errors import (
    ComparabilityError,
    ConfigError,
    HistoryLockError,
    IntegrityError,
    OverbenchError,
    SchemaError,
    SweepAborted,
    TraceFormatError,
    WorkerError,
)
from .history import (
    RatioPolicy,
    StatisticalPolicy,
    append_run,
    check_regression,
    export_gab_json,
)
from .probe import PutStrategyKind, verify_trace_file
from .runner import BenchmarkRun, ProbeKind, RunConfig, load_run, run_benchmark, run_thread_sweep
from .stats import MdeConfig, MdeMode, compare_runs, minimal_detectable_change, summarize_run
from .workload import WorkloadConfig

EXIT_OK = 0
EXIT_CHANGED = 1
EXIT_USAGE = 2
EXIT_INTEGRITY = 3

SWEEP_CSV_HEADER = ["workers", "probe", "mean_ns", "stddev_ns", "rel_stddev"]

log = logging.getLogger("overbench")


class _Output:
    """Human text goes to stdout unless ``--json`` claims it."""

    def __init__(self, as_json: bool) -> None:
        self.as_json = as_json

    def say(self, text: str = "") -> None:
        print(text, file=sys.stderr if self.as_json else sys.stdout)

    def emit(self, payload: Any) -> None:
        if self.as_json:
            json.dump(payload, sys.stdout, indent=2, default=str)
            sys.stdout.write("\n")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def _probe_list(values: Optional[list[str]], default: list[str]) -> list[ProbeKind]:
    names: list[str] = []
    for value in values or default:
        names.extend(x.strip() for x in value.split(",") if x.strip())
    if "both" in names:
        names = ["baseline", "binary-writer"]
    try:
        kinds = [ProbeKind(n) for n in names]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return list(dict.fromkeys(kinds))


def _setting(args: argparse.Namespace, settings: dict, key: str) -> Any:
    value = getattr(args, key, None)
    return settings[key] if value is None else value


def _run_config(args: argparse.Namespace, settings: dict, probe: ProbeKind) -> RunConfig:
    get = lambda key: _setting(args, settings, key)  # noqa: E731
    return RunConfig(
        loops=get("loops"),
        calls_per_loop=get("calls"),
        warmup_fraction=get("warmup"),
        workers=get("workers"),
        probe_kind=probe,
        workload=WorkloadConfig(recursion_depth=get("depth"), spin_ns=get("spin_ns")),
        queue_capacity=get("capacity"),
        put_strategy=PutStrategyKind(get("put_strategy")),
        output_dir=Path(get("output_dir")),
        spawn=bool(get("spawn")),
        keep_traces=bool(get("keep_traces")),
        unsafe_allow_mismatch=bool(getattr(args, "unsafe_allow_mismatch", False)),
    )


def _summary_row(run: BenchmarkRun, alpha: float, beta: float) -> dict[str, Any]:
    summary = summarize_run(run)
    sigma = summary.per_loop.rel_stddev
    n = run.config.loops
    table = minimal_detectable_change(sigma, MdeConfig(n, alpha, beta, MdeMode.TABLE_CONSISTENT))
    power = minimal_detectable_change(sigma, MdeConfig(n, alpha, beta, MdeMode.TWO_SAMPLE_POWER))
    return {
        "name": run.name,
        "probe": run.config.probe_kind.value,
        "workers": run.config.workers,
        "loops": n,
        "mean_ns": summary.per_loop.mean_ns,
        "stddev_ns": summary.per_loop.stddev_ns,
        "rel_stddev_pct": 100.0 * sigma,
        "per_call_stddev_ns": summary.per_call.stddev_ns,
        "per_call_rel_stddev_pct": 100.0 * summary.per_call.rel_stddev,
        "mde_table_pct": 100.0 * table,
        "mde_power_pct": 100.0 * power,
        "checksum": run.checksum_fold,
        "run_file": str(run.path) if run.path else None,
        "trace_files": [str(lr.trace_path) for lr in run.loop_results if lr.trace_path],
    }


def _print_table(out: _Output, rows: list[dict[str, Any]]) -> None:
    header = f"{'benchmark':<28} {'mean ns':>12} {'stddev ns':>11} {'σ %':>7} " \
             f"{'Δ table %':>10} {'Δ power %':>10} {'σ/call %':>9}"
    out.say(header)
    out.say("-" * len(header))
    for r in rows:
        out.say(f"{r['name']:<28} {r['mean_ns']:>12.2f} {r['stddev_ns']:>11.2f} "
                f"{r['rel_stddev_pct']:>7.2f} {r['mde_table_pct']:>10.2f} "
                f"{r['mde_power_pct']:>10.2f} {r['per_call_rel_stddev_pct']:>9.2f}")


# -- subcommands ---------------------------------------------------------

def cmd_run(args: argparse.Namespace, settings: dict, out: _Output) -> int:
    probes = _probe_list(args.probe, settings["probe"])
    configs = [_run_config(args, settings, p) for p in probes]
    runs = []
    for cfg in configs:
        runs.append(run_benchmark(cfg))
    rows = [_summary_row(r, settings["alpha"], settings["beta"]) for r in runs]
    _print_table(out, rows)
    for row in rows:
        out.say(f"run file: {row['run_file']}")
        if row["trace_files"]:
            out.say(f"trace files: {len(row['trace_files'])} in {Path(row['trace_files'][0]).parent}")
    checksum = sum(r.checksum_fold for r in runs)
    out.say(f"checksum: {checksum}")
    history = _setting(args, settings, "history")
    if history:
        append_run(history, runs, commit_id=args.commit)
        out.say(f"appended to {history}")
    out.emit({"runs": rows, "checksum": checksum, "history": history})
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, settings: dict, out: _Output) -> int:
    probes = _probe_list(args.probe, ["both"])
    counts = args.workers_list or settings["workers_list"]
    bases = [_run_config(args, settings, p) for p in probes]
    for base in bases:
        # validate every (probe, worker count) pair before measuring anything
        for count in counts:
            RunConfig(**{**base.__dict__, "workers": count})
    output_dir = bases[0].output_dir
    output_dir.mkdir(parents=True, exist_ok=True)
    if args.csv:
        csv_path = Path(args.csv)
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
        csv_path = output_dir / f"sweep-{stamp}.csv"
    rows: list[dict[str, Any]] = []
    status = EXIT_OK
    with open(csv_path, "x", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_CSV_HEADER)
        fh.flush()

        def record(run: BenchmarkRun) -> None:
            per_loop = summarize_run(run).per_loop
            writer.writerow([run.config.workers, run.config.probe_kind.value,
                             f"{per_loop.mean_ns:.3f}", f"{per_loop.stddev_ns:.3f}",
                             f"{per_loop.rel_stddev:.6f}"])
            fh.flush()
            rows.append(_summary_row(run, settings["alpha"], settings["beta"]))
            out.say(f"{run.name}: {per_loop.mean_ns:.2f} ns/call, σ {per_loop.rel_stddev_pct:.2f}%")

        for base in bases:
            try:
                run_thread_sweep(base, counts, on_run=record)
            except SweepAborted as exc:
                out.say(f"error: {exc}; {len(rows)} completed runs kept in {csv_path}")
                status = EXIT_INTEGRITY
                break
    out.say(f"sweep data: {csv_path}")
    out.emit({"csv": str(csv_path), "runs": rows, "complete": status == EXIT_OK})
    return status


def cmd_analyze(args: argparse.Namespace, settings: dict, out: _Output) -> int:
    if not args.runs and not args.history:
        raise ConfigError("analyze needs raw-run files and/or --history")
    payload: dict[str, Any] = {}
    status = EXIT_OK
    if args.runs:
        rows = [_summary_row(load_run(p), settings["alpha"], settings["beta"]) for p in args.runs]
        _print_table(out, rows)
        payload["runs"] = rows
    if args.history:
        if args.policy == "statistical":
            policy: Any = StatisticalPolicy(alpha=settings["alpha"], fallback_threshold=args.threshold)
        else:
            policy = RatioPolicy(threshold=args.threshold)
        alerts = check_regression(args.history, policy)
        for alert in alerts:
            out.say(f"REGRESSION {alert.describe()}")
        if not alerts:
            out.say("no regression")
        payload["alerts"] = [alert.__dict__ for alert in alerts]
        status = EXIT_CHANGED if alerts else EXIT_OK
    out.emit(payload)
    return status


def cmd_compare(args: argparse.Namespace, settings: dict, out: _Output) -> int:
    a, b = load_run(args.baseline), load_run(args.candidate)
    alpha = _setting(args, settings, "alpha")
    decision = compare_runs(a, b, alpha)
    verdict = "changed" if decision.changed else "no significant change"
    out.say(f"{a.name}: {100 * decision.relative_change:+.2f}% "
            f"(Welch p={decision.p_value:.3g}, alpha={alpha}) -> {verdict}")
    out.emit({"changed": decision.changed, "relative_change": decision.relative_change,
              "p_value": decision.p_value, "alpha": alpha})
    return EXIT_CHANGED if decision.changed else EXIT_OK


def cmd_mde(args: argparse.Namespace, settings: dict, out: _Output) -> int:
    mode = MdeMode.TWO_SAMPLE_POWER if args.mode == "power" else MdeMode.TABLE_CONSISTENT
    cfg = MdeConfig(n=args.n, alpha=_setting(args, settings, "alpha"),
                    beta=_setting(args, settings, "beta"), mode=mode)
    delta = minimal_detectable_change(args.sigma, cfg)
    out.say(f"{delta:.2f}")
    out.emit({"sigma_pct": args.sigma, "delta_pct": delta, "n": cfg.n,
              "alpha": cfg.alpha, "beta": cfg.beta, "mode": mode.value})
    return EXIT_OK


def cmd_export(args: argparse.Namespace, settings: dict, out: _Output) -> int:
    document = export_gab_json([load_run(p) for p in args.runs])
    text = json.dumps(document, indent=2, ensure_ascii=False)
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
        out.say(f"wrote {args.output}")
        out.emit(document)
    else:
        # the document itself is the machine-readable output
        print(text)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, settings: dict, out: _Output) -> int:
    reports = []
    status = EXIT_OK
    for path in args.traces:
        report = verify_trace_file(path, args.depth)
        out.say(f"{path}: {'ok' if report.ok else 'INVALID'} ({report.summary()})")
        for v in report.violations[: args.max_listed]:
            out.say(f"  trace {v.trace_id}: {v.kind} {v.detail}")
        if not report.ok:
            status = EXIT_INTEGRITY
        reports.append({
            "path": str(path),
            "ok": report.ok,
            "records": report.records,
            "traces": report.traces,
            "violations": [v.__dict__ for v in report.violations],
            "unknown_signature_ids": sorted(report.unknown_signature_ids),
        })
    out.emit({"files": reports})
    return status


# -- parser --------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--probe", action="append",
                   help="baseline, binary-writer or both (repeatable, comma-separated)")
    p.add_argument("--loops", type=int, help="loop starts per run (n)")
    p.add_argument("--calls", type=int, help="monitored calls per loop start and worker")
    p.add_argument("--depth", type=int, help="recursion depth of the monitored method")
    p.add_argument("--spin-ns", dest="spin_ns", type=int, help="busy-wait per recursion level")
    p.add_argument("--warmup", type=float, help="fraction of each loop start discarded")
    p.add_argument("--put-strategy", dest="put_strategy", choices=["sp", "yield"])
    p.add_argument("--capacity", type=int, help="record queue capacity")
    p.add_argument("--spawn", action="store_const", const=True,
                   help="fresh process per loop start")
    p.add_argument("--no-keep-traces", dest="keep_traces", action="store_const", const=False,
                   help="delete trace files after verification")
    p.add_argument("--output-dir", dest="output_dir")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true",
                        help="machine-readable output on stdout")
    common.add_argument("--config", help=f"settings file (default ./overbench.toml)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="overbench", description="Observability overhead microbenchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="measure one configuration")
    _add_run_flags(p)
    p.add_argument("--workers", type=int)
    p.add_argument("--history", help="append the result to this history file")
    p.add_argument("--commit", help="commit id for the history entry")
    p.add_argument("--unsafe-allow-mismatch", dest="unsafe_allow_mismatch", action="store_true",
                   help="allow the single-producer strategy with several workers "
                        "(corrupts traces; for testing the verifier)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="thread-count sweep to CSV")
    _add_run_flags(p)
    p.add_argument("--workers-list", dest="workers_list", type=_int_list,
                   help="comma-separated worker counts (default 1,2,4,8,12)")
    p.add_argument("--csv", help="output CSV path (default <output-dir>/sweep-<ts>.csv)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", parents=[common],
                       help="summarize run files and/or check a history for regressions")
    p.add_argument("runs", nargs="*")
    p.add_argument("--history")
    p.add_argument("--policy", choices=["ratio", "statistical"], default="ratio")
    p.add_argument("--threshold", type=float, default=2.0)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare", parents=[common], help="Welch test on two run files")
    p.add_argument("baseline")
    p.add_argument("candidate")
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("mde", parents=[common], help="minimal detectable relative change")
    p.add_argument("--sigma", type=float, required=True, help="relative stddev in percent")
    p.add_argument("--n", type=int, default=10, help="loop starts")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--mode", choices=["table", "power"], default="table")
    p.set_defaults(func=cmd_mde)

    p = sub.add_parser("export", parents=[common],
                       help="github-action-benchmark JSON from run files")
    p.add_argument("runs", nargs="+")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("verify", parents=[common], help="check binary trace files")
    p.add_argument("traces", nargs="+")
    p.add_argument("--depth", type=int, help="expected records per trace")
    p.add_argument("--max-listed", type=int, default=20)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    out = _Output(args.json)
    try:
        settings = load_config(args.config)
        for key in ("alpha", "beta"):
            if getattr(args, key, None) is not None:
                settings[key] = getattr(args, key)
        return args.func(args, settings, out)
    except (ConfigError, ComparabilityError) as exc:
        print(f"overbench: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrityError, TraceFormatError, WorkerError, SchemaError,
            HistoryLockError, OSError) as exc:
        print(f"overbench: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except OverbenchError as exc:
        print(f"overbench: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
