"""Command line: ``run``, ``inspect``, ``summarize`` and ``audit``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import FedChainError, LogFormatError
from .ledger import EVENT_TYPES, LOCAL_MODEL, read_log, verify_records
from .protocol import event_round_id
from .scenario import ScenarioConfig, audit_run, emit_summary, read_results, run_scenario, write_summary


def inspect_ledger(log_path, types=None, out=None) -> int:
    """Print the event table and the chain verdict; returns a process exit code."""
    out = out or sys.stdout
    text = Path(log_path).read_text()
    try:
        records = read_log(text.splitlines())
    except LogFormatError as exc:
        height = exc.height if exc.height is not None else "?"
        print(f"chain BROKEN at height {height}: {exc}", file=out)
        return 2
    wanted = None if not types else {t.encode() if isinstance(t, str) else t for t in types}
    print(f"{'seq':>6} {'height':>6} {'round':>5}  {'event_type':<14} {'sender':<10} {'enc':<3} {'bytes':>9}",
          file=out)
    current_round = None
    for rec in records:
        ev = rec.event()
        rid = event_round_id(ev)
        if rid is not None and ev.event_type != LOCAL_MODEL:
            current_round = rid
        if wanted is not None and ev.event_type not in wanted:
            continue
        print(f"{rec.seq:>6} {rec.height:>6} {current_round if current_round is not None else '-':>5}  "
              f"{ev.event_type.decode():<14} {ev.sender:<10} {'yes' if ev.is_encrypted else 'no':<3} "
              f"{len(ev.body):>9}", file=out)
    bad = verify_records(records)
    if bad is not None:
        print(f"chain BROKEN at height {bad}", file=out)
        return 1
    print(f"chain OK ({len(records)} events, {records[-1].height if records else 0} blocks)", file=out)
    return 0


def _cmd_run(args) -> int:
    cfg = ScenarioConfig.from_file(args.config)
    run = run_scenario(cfg, args.out, jobs=args.jobs)
    print(f"{cfg.scenario.value}: {len(run.points)} grid points, {len(run.rows)} rows -> {args.out}")
    return 0


def _cmd_inspect(args) -> int:
    return inspect_ledger(args.log, args.type)


def _cmd_summarize(args) -> int:
    rows = read_results(args.input)
    summary = emit_summary(rows)
    write_summary(summary, args.out)
    print(f"{len(summary)} summary rows -> {args.out}")
    return 0


def _cmd_audit(args) -> int:
    diffs = audit_run(args.run)
    for d in diffs:
        print(d)
    print("audit OK" if not diffs else f"audit FAILED ({len(diffs)} differences)")
    return 0 if not diffs else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedchain",
                                     description="Ledger-mediated federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario grid")
    p.add_argument("--config", required=True, help="flat key = value scenario file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="grid points to run in parallel")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("inspect", help="print and verify an exported ledger log")
    p.add_argument("--log", required=True)
    p.add_argument("--type", action="append", choices=sorted(t.decode() for t in EVENT_TYPES),
                   help="only show this event type (repeatable)")
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("summarize", help="aggregate results.csv across seeds")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("audit", help="recompute a run's rows from its ledgers and diff")
    p.add_argument("--run", required=True, help="directory written by `run`")
    p.set_defaults(func=_cmd_audit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FedChainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
