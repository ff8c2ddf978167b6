"""Event-handling latency harness.

Measures wall time from first resume to exit while the engine services a
fixed number of breakpoint hits or syscall boundaries, across many runs.
Raw per-run times go to a CSV; summary statistics to a sidecar file. An
installed GDB can optionally run an equivalent scripted session for an
informational median ratio (its absolute value depends entirely on the
host and GDB version).
"""

from __future__ import annotations

import math
import os
import shutil
import statistics
import subprocess
import tempfile
import time
from dataclasses import dataclass, field

from ..backend import StdioMode
from ..errors import FixtureError
from ..events import Debuggee

MODE_BREAKPOINT = "breakpoint"
MODE_SYSCALL = "syscall"

_LOOP_FIXTURE_SRC = r"""
#include <stdlib.h>
#include <stdio.h>

volatile long sink;

__attribute__((noinline)) void bench_target(long i) { sink += i; }

int main(int argc, char **argv) {
    long n = argc > 1 ? strtol(argv[1], 0, 10) : 1000;
    for (long i = 0; i < n; i++) bench_target(i);
    printf("%ld\n", (long)sink);
    return 0;
}
"""

_SYSCALL_FIXTURE_SRC = r"""
#include <stdlib.h>
#include <unistd.h>

int main(int argc, char **argv) {
    long n = argc > 1 ? strtol(argv[1], 0, 10) : 1000;
    char byte = 'x';
    for (long i = 0; i < n; i++) write(-1, &byte, 1);
    return 0;
}
"""

_fixture_dir: tempfile.TemporaryDirectory | None = None


def _compiler() -> str:
    for cc in ("cc", "gcc", "clang"):
        path = shutil.which(cc)
        if path:
            return path
    raise FixtureError("no C compiler available to build the bench fixtures")


def build_fixture(mode: str) -> str:
    """Compile (once per process) and return the fixture binary for a mode."""
    global _fixture_dir
    if _fixture_dir is None:
        _fixture_dir = tempfile.TemporaryDirectory(prefix="scriptdbg-bench-")
    src = _LOOP_FIXTURE_SRC if mode == MODE_BREAKPOINT else _SYSCALL_FIXTURE_SRC
    name = "bench_loop" if mode == MODE_BREAKPOINT else "bench_syscalls"
    binary = os.path.join(_fixture_dir.name, name)
    if not os.path.exists(binary):
        source = binary + ".c"
        with open(source, "w") as f:
            f.write(src)
        proc = subprocess.run(
            [_compiler(), "-O0", "-g", "-fno-omit-frame-pointer", "-no-pie", "-o", binary, source],
            capture_output=True, text=True,
        )
        if proc.returncode != 0:
            raise FixtureError(f"bench fixture failed to build: {proc.stderr.strip()}")
    return binary


@dataclass
class BenchResult:
    event_kind: str
    events_per_run: int
    runs: int
    times_ns: list[int] = field(default_factory=list)
    events_observed: int = 0
    gdb_times_ns: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def median_ns(self) -> float:
        return statistics.median(self.times_ns)

    @property
    def mean_ns(self) -> float:
        return statistics.mean(self.times_ns)

    @property
    def p10_ns(self) -> int:
        return nearest_rank(self.times_ns, 0.10)

    @property
    def p90_ns(self) -> int:
        return nearest_rank(self.times_ns, 0.90)

    @property
    def gdb_median_ns(self) -> float | None:
        return statistics.median(self.gdb_times_ns) if self.gdb_times_ns else None

    @property
    def median_ratio(self) -> float | None:
        """GDB median over engine median; > 1 means the engine is faster."""
        gdb = self.gdb_median_ns
        return (gdb / self.median_ns) if gdb else None


def nearest_rank(times: list[int], quantile: float) -> int:
    """Nearest-rank percentile: ceil(q*n)-th smallest value (1-based)."""
    ordered = sorted(times)
    rank = max(1, math.ceil(quantile * len(ordered)))
    return ordered[rank - 1]


def write_csv(result: BenchResult, path: str) -> None:
    with open(path, "w") as f:
        f.write("run,wall_ns\n")
        for i, t in enumerate(result.times_ns, start=1):
            f.write(f"{i},{t}\n")


def write_stats(result: BenchResult, path: str) -> None:
    with open(path, "w") as f:
        f.write(f"event_kind={result.event_kind}\n")
        f.write(f"events_per_run={result.events_per_run}\n")
        f.write(f"runs={result.runs}\n")
        f.write(f"median_ns={result.median_ns!r}\n")
        f.write(f"p10_ns={result.p10_ns!r}\n")
        f.write(f"p90_ns={result.p90_ns!r}\n")
        f.write(f"mean_ns={result.mean_ns!r}\n")
        if result.gdb_median_ns is not None:
            f.write(f"gdb_median_ns={result.gdb_median_ns!r}\n")
            f.write(f"median_ratio={result.median_ratio!r}\n")
        for w in result.warnings:
            f.write(f"warning={w}\n")


def _one_breakpoint_run(binary: str, events: int) -> tuple[int, int]:
    hits = 0

    def count(dbg, event, bp):
        nonlocal hits
        hits += 1

    with Debuggee.spawn(binary, [str(events)], stdio=StdioMode.PIPE) as dbg:
        dbg.set_breakpoint("bench_target", callback=count)
        t0 = time.monotonic_ns()
        dbg.run_until_exit()
        wall = time.monotonic_ns() - t0
    return wall, hits


def _one_syscall_run(binary: str, events: int) -> tuple[int, int]:
    boundaries = 0

    def bump(dbg, ctx):
        nonlocal boundaries
        boundaries += 1

    with Debuggee.spawn(binary, [str(events)], stdio=StdioMode.PIPE) as dbg:
        dbg.trace_syscalls("write", on_enter=bump, on_exit=bump)
        t0 = time.monotonic_ns()
        dbg.run_until_exit()
        wall = time.monotonic_ns() - t0
    return wall, boundaries // 2


def run_bench(mode: str, events: int, runs: int, out_csv: str,
              compare_gdb: bool = False, gdb_runs: int | None = None) -> BenchResult:
    """Run the harness; emits the CSV and a ``<out_csv>.stats`` sidecar."""
    if mode not in (MODE_BREAKPOINT, MODE_SYSCALL):
        raise ValueError(f"unknown bench mode {mode!r}")
    binary = build_fixture(mode)
    result = BenchResult(event_kind=mode, events_per_run=events, runs=runs)
    one_run = _one_breakpoint_run if mode == MODE_BREAKPOINT else _one_syscall_run
    for _ in range(runs):
        wall, observed = one_run(binary, events)
        if observed != events:
            raise FixtureError(f"engine observed {observed} events, expected {events}")
        result.times_ns.append(wall)
        result.events_observed += observed

    if compare_gdb:
        gdb = shutil.which("gdb")
        if gdb is None:
            result.warnings.append("gdb not found; engine-only result")
        else:
            n = gdb_runs if gdb_runs is not None else min(runs, 10)
            try:
                result.gdb_times_ns = _gdb_comparison(gdb, mode, binary, events, n)
            except (OSError, subprocess.SubprocessError, ValueError) as exc:
                result.warnings.append(f"gdb comparison failed: {exc}")

    write_csv(result, out_csv)
    write_stats(result, out_csv + ".stats")
    return result


_GDB_BP_SCRIPT = """
import time
import gdb

gdb.execute("set confirm off")
gdb.execute("set pagination off")
gdb.execute("set height 0")
gdb.execute("set width 0")

count = 0

class _Counter(gdb.Breakpoint):
    def stop(self):
        global count
        count += 1
        return False

_Counter("bench_target")
t0 = time.monotonic_ns()
gdb.execute("run {events} > /dev/null")
wall = time.monotonic_ns() - t0
print("BENCH_NS", wall)
print("BENCH_COUNT", count)
"""

_GDB_SYSCALL_SCRIPT = """
import time
import gdb

gdb.execute("set confirm off")
gdb.execute("set pagination off")
gdb.execute("set height 0")
gdb.execute("set width 0")
gdb.execute("catch syscall write")
gdb.execute("commands\\nsilent\\ncontinue\\nend")
t0 = time.monotonic_ns()
gdb.execute("run {events} > /dev/null")
wall = time.monotonic_ns() - t0
print("BENCH_NS", wall)
"""


def _gdb_comparison(gdb: str, mode: str, binary: str, events: int, runs: int) -> list[int]:
    """Drive a scripted session in an external GDB with logging pared down."""
    template = _GDB_BP_SCRIPT if mode == MODE_BREAKPOINT else _GDB_SYSCALL_SCRIPT
    script = template.replace("{events}", str(events))
    times = []
    with tempfile.NamedTemporaryFile("w", suffix=".py", delete=False) as f:
        f.write(script)
        script_path = f.name
    try:
        for _ in range(runs):
            proc = subprocess.run(
                [gdb, "--batch", "-nx", "-ex", f"file {binary}", "-x", script_path],
                capture_output=True, text=True, timeout=300,
            )
            wall = None
            for line in proc.stdout.splitlines():
                if line.startswith("BENCH_NS "):
                    wall = int(line.split()[1])
            if wall is None:
                raise ValueError(f"gdb produced no timing (stderr: {proc.stderr.strip()[:200]})")
            times.append(wall)
    finally:
        os.unlink(script_path)
    return times
