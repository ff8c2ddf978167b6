"""Branch coverage via one-shot breakpoints on both outcomes of each branch.

The branch map is an input file (one line per conditional branch, produced
by whatever disassembler the build pipeline uses); the tool plants a
one-shot trap on every taken/fallthrough target, runs the binary, and
reports which outcomes were reached. Reports from separate runs can be
merged so coverage accumulates across a test suite.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from ..backend import StdioMode
from ..errors import MapFormatError
from ..events import Debuggee
from ..symbols import LoadedObject


@dataclass(frozen=True)
class BranchSpec:
    """One conditional branch: its address and the two possible successors."""

    branch_addr: int
    taken_target: int
    fallthrough_target: int


@dataclass
class BranchOutcome:
    branch_addr: int
    taken_hit: bool = False
    fallthrough_hit: bool = False


@dataclass
class CoverageReport:
    outcomes: list[BranchOutcome] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def covered(self) -> int:
        return sum(int(o.taken_hit) + int(o.fallthrough_hit) for o in self.outcomes)

    @property
    def branch_coverage(self) -> float:
        if not self.outcomes:
            return 1.0  # vacuously complete; a warning is attached instead
        return self.covered / (2 * len(self.outcomes))


def parse_branch_map(path: str) -> list[BranchSpec]:
    """Lines of ``<branch> <taken> <fallthrough>`` hex addresses; # comments."""
    specs = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 3:
                raise MapFormatError(lineno, f"line {lineno}: expected 3 addresses, got {len(parts)}")
            try:
                branch, taken, fall = (int(p, 16) for p in parts)
            except ValueError:
                raise MapFormatError(lineno, f"line {lineno}: addresses must be hex") from None
            if taken == fall:
                raise MapFormatError(lineno, f"line {lineno}: taken and fallthrough targets are equal")
            specs.append(BranchSpec(branch, taken, fall))
    return specs


def read_report(path: str) -> CoverageReport:
    report = CoverageReport()
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("coverage="):
                continue
            addr_s, taken_s, fall_s = line.split()
            report.outcomes.append(BranchOutcome(
                branch_addr=int(addr_s, 16),
                taken_hit=taken_s == "taken=1",
                fallthrough_hit=fall_s == "fallthrough=1",
            ))
    return report


def write_report(report: CoverageReport, path: str) -> None:
    with open(path, "w") as f:
        for o in report.outcomes:
            f.write(f"{o.branch_addr:#x} taken={int(o.taken_hit)} fallthrough={int(o.fallthrough_hit)}\n")
        f.write(f"coverage={report.branch_coverage!r}\n")


def merge_reports(base: CoverageReport, extra: CoverageReport) -> CoverageReport:
    """Union of covered outcomes; the result never covers less than either input."""
    by_addr = {o.branch_addr: BranchOutcome(o.branch_addr, o.taken_hit, o.fallthrough_hit)
               for o in base.outcomes}
    for o in extra.outcomes:
        cur = by_addr.setdefault(o.branch_addr, BranchOutcome(o.branch_addr))
        cur.taken_hit = cur.taken_hit or o.taken_hit
        cur.fallthrough_hit = cur.fallthrough_hit or o.fallthrough_hit
    merged = CoverageReport(outcomes=sorted(by_addr.values(), key=lambda o: o.branch_addr))
    merged.warnings = list(dict.fromkeys(base.warnings + extra.warnings))
    return merged


def _main_object(dbg: Debuggee, binary: str) -> LoadedObject | None:
    real = os.path.realpath(binary)
    for obj in dbg.objects():
        if os.path.realpath(obj.path) == real:
            return obj
    return None


def run_coverage(binary: str, argv: list[str], branch_map_path: str,
                 report_path: str, merge: bool = False, keep_aslr: bool = False,
                 stdin_data: bytes | None = None) -> CoverageReport:
    """Execute one test run and write (or merge into) the coverage report."""
    specs = parse_branch_map(branch_map_path)
    report = CoverageReport(outcomes=[BranchOutcome(s.branch_addr) for s in specs])
    if not specs:
        report.warnings.append("empty branch map: coverage is vacuously 1.0")

    if specs:
        # Several outcomes may share a target address; one trap feeds them all.
        wanted: dict[int, list[tuple[int, str]]] = {}
        for idx, spec in enumerate(specs):
            wanted.setdefault(spec.taken_target, []).append((idx, "taken"))
            wanted.setdefault(spec.fallthrough_target, []).append((idx, "fallthrough"))

        stdio = StdioMode.PIPE if stdin_data is not None else StdioMode.INHERIT
        with Debuggee.spawn(binary, argv, stdio=stdio, disable_aslr=not keep_aslr) as dbg:
            main_obj = _main_object(dbg, binary)

            def rebase(addr: int) -> int:
                return main_obj.runtime_address(addr) if main_obj is not None else addr

            def make_callback(outcomes: list[tuple[int, str]]):
                def hit(dbg, event, bp):
                    for idx, side in outcomes:
                        if side == "taken":
                            report.outcomes[idx].taken_hit = True
                        else:
                            report.outcomes[idx].fallthrough_hit = True
                return hit

            for target, outcomes in wanted.items():
                dbg.set_breakpoint(rebase(target), one_shot=True,
                                   callback=make_callback(outcomes))
            if stdin_data is not None:
                dbg.stdin_write(stdin_data)
                dbg.stdin_close()
            dbg.run_until_exit()

    if merge and os.path.exists(report_path):
        report = merge_reports(read_report(report_path), report)
    write_report(report, report_path)
    return report
