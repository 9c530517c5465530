"""Command-line interface: simulate, serve, bench, profile, and lift.

Exit codes: 0 on success, 1 when a run produced no usable result (for
example a benchmark where every request failed), and 2 for usage, parse,
or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from .core import (
    ConfigError,
    EngineConfig,
    Scenario,
    WorkloadConfig,
    adapter_name,
    load_scenario,
    scenario_from_dict,
)
from .engine import run
from .gateway import ReplicaSet, bench, serve
from .metrics import RunReport, merge, write_records_csv
from .profiler import (
    PROFILE_FEATURES,
    QUALITY_METRICS,
    compute_profile,
    fit_lift_model,
    load_examples_jsonl,
    load_quality_records,
    load_task_profiles,
    loo_rmse,
    profile_features,
    profile_to_json_dict,
)

__all__ = ["main"]

_SUMMARY_ROWS = ("total_request_ms", "ttft_ms", "streaming_ms", "throughput_tok_s")


def format_summary_table(report: RunReport, title: str) -> str:
    """Render a report as a fixed-width metric x {average, p90} text table."""
    summary = report.summary
    lines = [f"== {title} =="]
    counters = [f"request_count={summary['request_count']}"]
    for key in ("submitted", "completed", "discarded", "failure_count"):
        if key in summary:
            counters.append(f"{key}={summary[key]}")
    lines.append("  ".join(counters))
    lines.append(f"{'metric':<28}{'average':>14}{'p90':>14}")
    for key in _SUMMARY_ROWS:
        block = summary.get(key)
        if block is not None:
            lines.append(f"{key:<28}{block['average']:>14.3f}{block['p90']:>14.3f}")
    aggregate = summary.get("aggregate_throughput_tok_s")
    if aggregate is not None:
        lines.append(f"{'aggregate_throughput_tok_s':<28}{aggregate:>14.3f}{'-':>14}")
    if report.per_replica:
        pairs = "  ".join(f"{k}={v}" for k, v in sorted(report.per_replica.items()))
        lines.append(f"per-replica: {pairs}")
    if report.cache:
        pairs = "  ".join(f"{k}={v}" for k, v in sorted(report.cache.items()))
        lines.append(f"cache: {pairs}")
    return "\n".join(lines) + "\n"


def _bundled_scenario_names() -> list[str]:
    directory = resources.files("adapterd").joinpath("scenarios")
    return sorted(p.name[: -len(".json")] for p in directory.iterdir() if p.name.endswith(".json"))


def _resolve_scenario(token: str) -> Scenario:
    path = Path(token)
    if path.exists():
        return load_scenario(path)
    bundled = resources.files("adapterd").joinpath("scenarios", f"{token}.json")
    if bundled.is_file():
        return scenario_from_dict(json.loads(bundled.read_text(encoding="utf-8")))
    names = ", ".join(_bundled_scenario_names())
    raise ValueError(f"no scenario file or bundled scenario named {token!r} (bundled: {names})")


def _write_output(report: RunReport, output: Path, format_: str, include_records: bool) -> None:
    if format_ == "csv":
        with open(output, "w", encoding="utf-8", newline="") as handle:
            write_records_csv(report.records or (), handle)
    else:
        output.write_text(report.to_json_str(include_records), encoding="utf-8")


def _split_users(total: int, replicas: int) -> list[int]:
    """Contiguous near-even split: the first `total % replicas` blocks get one extra."""
    base, extra = divmod(total, replicas)
    return [base + 1 if i < extra else base for i in range(replicas)]


def cmd_simulate(args: argparse.Namespace) -> int:
    scenario = _resolve_scenario(args.scenario)
    if scenario.mode != "virtual":
        print(
            f"error: scenario {scenario.name!r} has mode {scenario.mode!r}; "
            "simulate runs virtual mode only (use `serve` plus `bench` for live runs)",
            file=sys.stderr,
        )
        return 2
    workload = scenario.workload
    if args.seed is not None:
        workload = replace(workload, seed=args.seed)
    if args.format == "csv" and args.output is None:
        print("error: --format csv requires --output", file=sys.stderr)
        return 2

    if scenario.replicas == 1:
        report = run(scenario.engine, workload, prewarm_adapters=scenario.prewarm_adapters)
    else:
        blocks = _split_users(workload.users, scenario.replicas)
        offset = 0
        sub_reports = []
        per_replica: dict[str, int] = {}
        for index, block_users in enumerate(blocks):
            if block_users == 0:
                per_replica[f"replica-{index}"] = 0
                continue
            sub_report = run(
                scenario.engine,
                replace(workload, users=block_users),
                prewarm_adapters=scenario.prewarm_adapters,
                user_index_offset=offset,
                request_id_prefix=f"rep{index}-",
            )
            sub_reports.append(sub_report)
            per_replica[f"replica-{index}"] = len(sub_report.records or ())
            offset += block_users
        merged = merge(sub_reports)
        report = replace(
            merged,
            config={"engine": scenario.engine.to_dict(), "workload": workload.to_dict()},
            per_replica=per_replica,
        )

    sys.stdout.write(format_summary_table(report, scenario.name))
    if args.output is not None:
        _write_output(report, args.output, args.format, args.records)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    adapters = [adapter_name(i) for i in range(args.adapters)]
    serve(EngineConfig(), port=args.port, adapters=adapters, prewarm=args.prewarm)
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    workload = WorkloadConfig(
        n_adapters=args.adapters,
        users=args.users,
        duration_ms=args.duration_s * 1000.0,
        input_tokens_min=args.input_tokens_min,
        input_tokens_max=args.input_tokens_max,
        output_tokens_min=args.output_tokens_min,
        output_tokens_max=args.output_tokens_max,
        seed=args.seed,
    )
    report = bench(ReplicaSet(endpoints=tuple(args.url)), workload)
    sys.stdout.write(format_summary_table(report, "bench"))
    if args.output is not None:
        _write_output(report, args.output, "json", include_records=True)
    if report.summary["completed"] == 0:
        print("error: no request completed", file=sys.stderr)
        return 1
    return 0


def cmd_profile(args: argparse.Namespace) -> int:
    examples = load_examples_jsonl(args.dataset)
    name = args.name or Path(args.dataset).stem
    profile = compute_profile(examples, name)
    text = json.dumps(profile_to_json_dict(profile), indent=2, sort_keys=True) + "\n"
    if args.output is not None:
        args.output.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _aligned_lift_data(
    profiles_path: str, quality_path: str, target: str
) -> tuple[list[str], list[list[float]], list[float], list[float]]:
    """Join profile and quality tables on task name; error on any mismatch."""
    profiles = {p.name: p for p in load_task_profiles(profiles_path)}
    quality = {q.name: q for q in load_quality_records(quality_path)}
    if set(profiles) != set(quality):
        only_profiles = sorted(set(profiles) - set(quality))
        only_quality = sorted(set(quality) - set(profiles))
        raise ValueError(
            f"task names differ: only in profiles {only_profiles}, only in quality {only_quality}"
        )
    names = sorted(profiles)
    matrix = [profile_features(profiles[name]) for name in names]
    y = [getattr(quality[name], target) for name in names]
    base_scores = [quality[name].avg_base_score for name in names]
    return names, matrix, y, base_scores


def cmd_lift(args: argparse.Namespace) -> int:
    names, matrix, y, base_scores = _aligned_lift_data(args.profiles, args.quality, args.target)
    augmented = [row + [score] for row, score in zip(matrix, base_scores)]
    augmented_names = PROFILE_FEATURES + ("avg_base_score",)
    model = fit_lift_model(matrix, y, PROFILE_FEATURES, args.target)
    augmented_model = fit_lift_model(augmented, y, augmented_names, args.target)

    lines = [
        f"target: {args.target}",
        f"tasks: {len(names)}",
        f"in-sample RMSE (profile features): {model.train_rmse:.4f}",
        f"in-sample RMSE (profile features + avg_base_score): {augmented_model.train_rmse:.4f}",
    ]
    result: dict = {
        "target": args.target,
        "n_tasks": len(names),
        "rmse_insample": model.train_rmse,
        "rmse_insample_with_base_score": augmented_model.train_rmse,
        "weights": dict(zip(model.feature_names, model.weights)),
        "intercept": model.intercept,
    }
    if args.mode == "loo":
        loo = loo_rmse(matrix, y, PROFILE_FEATURES, args.target)
        loo_augmented = loo_rmse(augmented, y, augmented_names, args.target)
        lines.append(f"LOO RMSE (profile features): {loo:.4f}")
        lines.append(f"LOO RMSE (profile features + avg_base_score): {loo_augmented:.4f}")
        result["rmse_loo"] = loo
        result["rmse_loo_with_base_score"] = loo_augmented
    lines.append("weights (z-scored profile features):")
    for feature, weight in zip(model.feature_names, model.weights):
        lines.append(f"  {feature:<24}{weight:+.4f}")
    lines.append(f"  {'intercept':<24}{model.intercept:+.4f}")

    sys.stdout.write("\n".join(lines) + "\n")
    if args.output is not None:
        args.output.write_text(
            json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adapterd",
        description="Multi-adapter serving simulator, live gateway, and lift profiler.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario in deterministic virtual time")
    sim.add_argument("scenario", help="scenario JSON path or bundled name")
    sim.add_argument("--seed", type=int, default=None, help="override the workload seed")
    sim.add_argument("--output", type=Path, default=None, help="write the report to this file")
    sim.add_argument("--format", choices=("json", "csv"), default="json")
    sim.add_argument(
        "--records", action="store_true", help="include per-request records in JSON output"
    )
    sim.set_defaults(handler=cmd_simulate)

    srv = sub.add_parser("serve", help="run the live SSE gateway in the foreground")
    srv.add_argument("--port", type=int, default=None, help="default: $ADAPTERD_PORT or 8000")
    srv.add_argument("--adapters", type=int, default=0, help="number of adapters to register")
    srv.add_argument("--prewarm", action="store_true", help="load all adapters onto the GPU")
    srv.set_defaults(handler=cmd_serve)

    ben = sub.add_parser("bench", help="drive a closed-loop workload against live replicas")
    ben.add_argument("--url", action="append", required=True, help="replica URL (repeatable)")
    ben.add_argument("--users", type=int, default=1)
    ben.add_argument("--duration-s", type=float, default=10.0)
    ben.add_argument("--adapters", type=int, default=0)
    ben.add_argument("--seed", type=int, default=0)
    ben.add_argument("--input-tokens-min", type=int, default=30)
    ben.add_argument("--input-tokens-max", type=int, default=500)
    ben.add_argument("--output-tokens-min", type=int, default=1)
    ben.add_argument("--output-tokens-max", type=int, default=120)
    ben.add_argument("--output", type=Path, default=None)
    ben.set_defaults(handler=cmd_bench)

    prof = sub.add_parser("profile", help="profile a JSONL dataset of input/output pairs")
    prof.add_argument("dataset", help="JSONL file with {\"input\": ..., \"output\": ...} lines")
    prof.add_argument("--name", default=None, help="task name (default: dataset file stem)")
    prof.add_argument("--output", type=Path, default=None)
    prof.set_defaults(handler=cmd_profile)

    lift = sub.add_parser("lift", help="fit a fine-tuning lift model from task profiles")
    lift.add_argument("--profiles", required=True, help="task-profile CSV")
    lift.add_argument("--quality", required=True, help="quality-metric CSV")
    lift.add_argument("--target", required=True, choices=QUALITY_METRICS)
    lift.add_argument("--mode", choices=("insample", "loo"), default="insample")
    lift.add_argument("--output", type=Path, default=None)
    lift.set_defaults(handler=cmd_lift)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as error:
        for violation in error.violations:
            print(f"error: {violation}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as error:
        print(f"error: {error}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
