"""Command-line front end: trace, coverage, triage and bench subcommands.

Exit codes: 0 on success, 1 on tool or engine errors, 2 on usage errors
(argparse's own convention).
"""

from __future__ import annotations

import argparse
import signal
import sys

from ..errors import NoCrash, ScriptDbgError
from . import bench as bench_mod
from . import coverage as coverage_mod
from . import trace as trace_mod
from . import triage as triage_mod


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scriptdbg",
                                     description="Scriptable debugger tools for Linux binaries")
    parser.add_argument("--keep-aslr", action="store_true",
                        help="leave address-space randomization enabled in the target")
    parser.add_argument("--timeout", type=float, default=None, metavar="SEC",
                        help="abort the command after this many seconds")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("trace", help="log the target's syscalls")
    p.add_argument("binary")
    p.add_argument("argv", nargs="*")
    p.add_argument("--filter", help="comma-separated syscall names to trace (default: all)")
    p.add_argument("--output", "-o", default="-", help="log file (default: stdout)")

    p = sub.add_parser("coverage", help="measure branch coverage for one test run")
    p.add_argument("binary")
    p.add_argument("argv", nargs="*")
    p.add_argument("--branch-map", required=True, help="file of branch/taken/fallthrough addresses")
    p.add_argument("--report", required=True, help="coverage report path")
    p.add_argument("--merge", action="store_true", help="union with an existing report")
    p.add_argument("--stdin-file", help="feed this file to the target's stdin")

    p = sub.add_parser("triage", help="post-mortem a crashing stdin payload")
    p.add_argument("binary")
    p.add_argument("--payload", help="file with the crashing input")
    p.add_argument("--payload-hex", help="crashing input as a hex string")
    p.add_argument("--max-len", type=int, default=4096,
                   help="pattern length for offset discovery (default 4096)")

    p = sub.add_parser("bench", help="measure event-handling latency")
    p.add_argument("--mode", choices=[bench_mod.MODE_BREAKPOINT, bench_mod.MODE_SYSCALL],
                   default=bench_mod.MODE_BREAKPOINT)
    p.add_argument("--events", type=int, default=1000)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--out", required=True, help="CSV output path (stats go to OUT.stats)")
    p.add_argument("--compare-gdb", action="store_true",
                   help="also time an equivalent scripted GDB session")
    p.add_argument("--gdb-runs", type=int, default=None)
    return parser


def _cmd_trace(args) -> int:
    filter_names = args.filter.split(",") if args.filter else None
    if args.output == "-":
        status = trace_mod.run_trace(args.binary, args.argv, filter_names,
                                     sys.stdout, keep_aslr=args.keep_aslr)
    else:
        with open(args.output, "w") as out:
            status = trace_mod.run_trace(args.binary, args.argv, filter_names,
                                         out, keep_aslr=args.keep_aslr)
    if status < 0:
        return 128 - status  # killed by signal
    return status


def _cmd_coverage(args) -> int:
    stdin_data = None
    if args.stdin_file:
        with open(args.stdin_file, "rb") as f:
            stdin_data = f.read()
    report = coverage_mod.run_coverage(args.binary, args.argv, args.branch_map,
                                       args.report, merge=args.merge,
                                       keep_aslr=args.keep_aslr, stdin_data=stdin_data)
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"coverage={report.branch_coverage!r}")
    return 0


def _cmd_triage(args) -> int:
    if args.payload:
        with open(args.payload, "rb") as f:
            payload = f.read()
    elif args.payload_hex:
        payload = bytes.fromhex(args.payload_hex)
    else:
        print("triage: provide --payload or --payload-hex", file=sys.stderr)
        return 2
    try:
        finding = triage_mod.run_triage(args.binary, payload, max_len=args.max_len,
                                        keep_aslr=args.keep_aslr)
    except NoCrash as exc:
        print(f"no crash: {exc}", file=sys.stderr)
        return 1
    print(finding.summary())
    return 0


def _cmd_bench(args) -> int:
    result = bench_mod.run_bench(args.mode, args.events, args.runs, args.out,
                                 compare_gdb=args.compare_gdb, gdb_runs=args.gdb_runs)
    for warning in result.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    line = (f"{result.event_kind}: runs={result.runs} events/run={result.events_per_run} "
            f"median={result.median_ns / 1e6:.3f}ms mean={result.mean_ns / 1e6:.3f}ms")
    if result.median_ratio is not None:
        line += f" gdb_ratio={result.median_ratio:.2f}x"
    print(line)
    return 0


_HANDLERS = {
    "trace": _cmd_trace,
    "coverage": _cmd_coverage,
    "triage": _cmd_triage,
    "bench": _cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.timeout:
        def on_alarm(signo, frame):
            raise TimeoutError(f"command exceeded {args.timeout}s")
        signal.signal(signal.SIGALRM, on_alarm)
        signal.setitimer(signal.ITIMER_REAL, args.timeout)
    try:
        return _HANDLERS[args.command](args)
    except (ScriptDbgError, TimeoutError, OSError) as exc:
        print(f"scriptdbg: error: {exc}", file=sys.stderr)
        return 1
    finally:
        if args.timeout:
            signal.setitimer(signal.ITIMER_REAL, 0)


if __name__ == "__main__":
    sys.exit(main())
