"""Command-line front end: run scenarios, audit artifacts, query history.

Commands:
    run <scenario.json> -o <dir>   simulate and write the audit artifacts
    verify <ledger>                recompute a persisted chain
    history <ledger> <key>         one vehicle's checkpoint history
    audit <snapshot>...            scrub parity-cluster snapshot files

``run`` writes ledger.txt, verdicts.tsv, ground_truth.jsonl and
report.json into the output directory (default: $AUTOBOX_OUT). All
machine-readable outputs are deterministic for identical inputs; wall
timing appears only in the human summary on stdout.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import parity
from .auditcore import is_hex_digest
from .ledger import (
    ApprovedLibrary,
    LedgerFormatError,
    VerdictStatus,
    history_from_file,
    verify_chain,
)
from .vehiclesim import ScenarioError, ScenarioResult, load_scenario, run_scenario

LEDGER_FILE = "ledger.txt"
VERDICTS_FILE = "verdicts.tsv"
GROUND_TRUTH_FILE = "ground_truth.jsonl"
REPORT_FILE = "report.json"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="autobox",
        description="Distributed audit-trail black box: scenario runner and auditors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario file and write artifacts")
    run_p.add_argument("scenario", help="scenario JSON file")
    run_p.add_argument(
        "-o",
        "--out",
        default=os.environ.get("AUTOBOX_OUT", "autobox-out"),
        help="output directory (default: $AUTOBOX_OUT or ./autobox-out)",
    )
    run_p.add_argument("--seed", type=int, default=None, help="override scenario seed")
    run_p.add_argument(
        "--expect-findings",
        action="store_true",
        help="exit 0 even when the run surfaces tamper flags or bad verdicts",
    )
    run_p.add_argument(
        "--library",
        default=None,
        help="approved-library file overriding the scenario's library section",
    )
    run_p.add_argument(
        "--emit-library",
        default=None,
        help="write the observed meta digests as an approved-library file",
    )

    verify_p = sub.add_parser("verify", help="verify a persisted ledger chain")
    verify_p.add_argument("ledger", help="ledger file")

    history_p = sub.add_parser("history", help="print one vehicle's checkpoint history")
    history_p.add_argument("ledger", help="ledger file")
    history_p.add_argument("vehicle_key", help="vehicle key (64 hex chars)")
    history_p.add_argument(
        "--machine", action="store_true", help="tab-separated lines instead of a table"
    )

    audit_p = sub.add_parser("audit", help="scrub parity-cluster snapshot files")
    audit_p.add_argument("snapshots", nargs="+", help="cluster snapshot files")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except FileNotFoundError:
        print(f"error: no such scenario file: {args.scenario}", file=sys.stderr)
        return 2
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        scenario = _with_seed(scenario, args.seed)
    if args.library:
        try:
            lib = ApprovedLibrary.from_file_text(
                Path(args.library).read_text(encoding="utf-8")
            )
        except (OSError, ValueError) as exc:
            print(f"error: cannot load library: {exc}", file=sys.stderr)
            return 2
        scenario = _with_library(
            scenario, {v: tuple(lib.approved_for(v)) for v in lib.variants()}
        )

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    result = run_scenario(scenario, ledger_path=outdir / LEDGER_FILE)
    elapsed = time.perf_counter() - started

    (outdir / VERDICTS_FILE).write_bytes(result.verdicts_text().encode("utf-8"))
    (outdir / GROUND_TRUTH_FILE).write_bytes(
        result.ground_truth_text().encode("utf-8")
    )
    for name, blob in result.cluster_snapshots:
        (outdir / name).write_bytes(blob)
    report = _build_report(result)
    (outdir / REPORT_FILE).write_bytes(
        (json.dumps(report, indent=2, sort_keys=True) + "\n").encode("utf-8")
    )
    if args.emit_library:
        lib = ApprovedLibrary(
            {v: list(d) for v, d in result.observed_library().items()}
        )
        Path(args.emit_library).write_bytes(lib.to_file_text().encode("utf-8"))

    _print_summary(result, elapsed)
    if result.findings and not args.expect_findings:
        return 1
    return 0


def _with_seed(scenario, seed):
    from dataclasses import replace

    return replace(scenario, seed=seed)


def _with_library(scenario, library):
    from dataclasses import replace

    return replace(scenario, approved_library=library)


def _build_report(result: ScenarioResult) -> dict:
    vehicles = {}
    for v in result.vehicles:
        verdict_counts: dict[str, int] = {}
        for _, verdict in result.verdicts:
            if verdict.vehicle_key in v.vehicle_keys:
                name = verdict.status.value
                verdict_counts[name] = verdict_counts.get(name, 0) + 1
        vehicles[v.vin] = {
            "variant_code": v.variant_code,
            "vehicle_keys": list(v.vehicle_keys),
            "checkpoints": len(v.captures),
            "verdicts": verdict_counts,
            "tamper_flag": v.tamper_flag,
            "tamper_fields": {
                f: sorted(mods) for f, mods in sorted(v.tamper_details.items())
            },
        }
    return {
        "scenario_id": result.scenario.scenario_id,
        "seed": result.scenario.seed,
        "duration_s": result.scenario.duration_s,
        "blocks": len(result.blocks),
        "vehicles": vehicles,
        "alerts": list(result.alerts),
        "findings": result.findings,
    }


def _print_summary(result: ScenarioResult, elapsed: float) -> None:
    print(f"scenario {result.scenario.scenario_id}: {len(result.blocks)} block(s)")
    for v in result.vehicles:
        statuses = [
            verdict.status.value
            for _, verdict in result.verdicts
            if verdict.vehicle_key in v.vehicle_keys
        ]
        if statuses and all(s == VerdictStatus.APPROVED.value for s in statuses):
            verdict_note = "Approved"
        elif statuses:
            bad = sorted(set(s for s in statuses if s != VerdictStatus.APPROVED.value))
            verdict_note = ",".join(bad)
        else:
            verdict_note = "no verdicts"
        flag_note = " TAMPER-FLAG" if v.tamper_flag else ""
        print(
            f"  {v.vin}: {len(v.captures)} checkpoint(s), verdicts: {verdict_note}{flag_note}"
        )
    for alert in result.alerts:
        print(f"  alert: {alert}")
    print(f"findings: {'yes' if result.findings else 'none'} ({elapsed:.2f}s)")


def _cmd_verify(args: argparse.Namespace) -> int:
    path = Path(args.ledger)
    if not path.exists():
        print(f"error: no such ledger file: {path}", file=sys.stderr)
        return 2
    try:
        result = verify_chain(path)
    except LedgerFormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 2
    print(result.describe())
    return 0 if result.valid else 1


def _cmd_history(args: argparse.Namespace) -> int:
    if not is_hex_digest(args.vehicle_key):
        print("error: vehicle key must be 64 lowercase hex chars", file=sys.stderr)
        return 2
    path = Path(args.ledger)
    if not path.exists():
        print(f"error: no such ledger file: {path}", file=sys.stderr)
        return 2
    try:
        entries = history_from_file(path, args.vehicle_key)
    except LedgerFormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 2
    if args.machine:
        for entry in entries:
            print(entry.machine_line())
        return 0
    header = ("seq", "meta_digest", "trigger", "sim_time", "block")
    rows = [
        (
            str(e.checkpoint_seq),
            e.meta_digest,
            e.trigger,
            str(e.sim_time),
            str(e.block_index),
        )
        for e in entries
    ]
    widths = [
        max(len(col[i]) for col in [header] + rows) for i in range(len(header))
    ]
    for col in [header] + rows:
        print("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(col)).rstrip())
    return 0


def _cmd_audit(args: argparse.Namespace) -> int:
    status = 0
    for name in args.snapshots:
        path = Path(name)
        if not path.exists():
            print(f"{name}: error: no such file", file=sys.stderr)
            status = 2
            continue
        try:
            cluster = parity.load_snapshot(path.read_bytes())
            report = parity.scrub(cluster)
        except parity.ClusterError as exc:
            print(f"{name}: format error: {exc}", file=sys.stderr)
            status = 2
            continue
        except parity.MultiFaultError as exc:
            print(f"{name}: uncorrectable: {exc}")
            status = max(status, 1)
            continue
        if report.clean:
            print(f"{name}: clean")
        else:
            print(
                f"{name}: corrupt device={report.device} "
                f"records={len(report.records)}"
            )
            status = max(status, 1)
    return status


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "verify": _cmd_verify,
        "history": _cmd_history,
        "audit": _cmd_audit,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
