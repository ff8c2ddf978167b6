import io
import shutil
import signal

import pytest

from scriptdbg.errors import MapFormatError, NoCrash
from scriptdbg.tools import bench as bench_mod
from scriptdbg.tools import coverage as coverage_mod
from scriptdbg.tools import trace as trace_mod
from scriptdbg.tools import triage as triage_mod

from .conftest import conditional_branches, objdump_function


def make_branch_map(fixtures, tmp_path):
    binary = fixtures.build("branches10.c")
    branches = conditional_branches(binary, "main")
    assert len(branches) == 10, "fixture must compile to exactly 10 conditional jumps"
    targets = [t for _, t, f in branches] + [f for _, t, f in branches]
    assert len(set(targets)) == 20, "all jump outcomes must be distinct addresses"
    path = tmp_path / "branches.map"
    lines = ["# branch taken fallthrough"]
    for b, t, f in branches:
        lines.append(f"{b:x} {t:x} {f:x}")
    path.write_text("\n".join(lines) + "\n")
    return binary, path


class TestTraceTool:
    def test_filtered_write_lines(self, fixtures, tmp_path):
        writes50 = fixtures.build("writes50.c", freestanding=True)
        out = io.StringIO()
        status = trace_mod.run_trace(str(writes50), [], ["write"], out)
        assert status == 0
        lines = out.getvalue().splitlines()
        assert len(lines) == 50
        assert all(" write(" in line for line in lines)

    def test_ret_is_byte_count(self, fixtures):
        stepper = fixtures.build("stepper.S", freestanding=True)
        out = io.StringIO()
        trace_mod.run_trace(str(stepper), [], ["write"], out)
        line = out.getvalue().strip()
        assert line.endswith("= 0x2")

    def test_unknown_filter_rejected_before_spawn(self, fixtures):
        from scriptdbg.errors import UnknownSyscall

        stepper = fixtures.build("stepper.S", freestanding=True)
        with pytest.raises(UnknownSyscall):
            trace_mod.run_trace(str(stepper), [], ["notasyscall"], io.StringIO())

    def test_unpaired_final_call_logged_with_question_mark(self, fixtures):
        stepper = fixtures.build("stepper.S", freestanding=True)
        out = io.StringIO()
        trace_mod.run_trace(str(stepper), [], None, out)
        lines = out.getvalue().splitlines()
        assert lines[-1].endswith("= ?")
        assert " exit(" in lines[-1] or " exit_group(" in lines[-1]


class TestCoverageTool:
    def test_seven_of_twenty_outcomes(self, fixtures, tmp_path):
        binary, branch_map = make_branch_map(fixtures, tmp_path)
        report_path = tmp_path / "cov.txt"
        report = coverage_mod.run_coverage(str(binary), ["0"], str(branch_map),
                                           str(report_path))
        assert report.covered == 7
        assert report.branch_coverage == 0.35

    def test_merge_reaches_full_coverage(self, fixtures, tmp_path):
        binary, branch_map = make_branch_map(fixtures, tmp_path)
        report_path = tmp_path / "cov.txt"
        r1 = coverage_mod.run_coverage(str(binary), ["0"], str(branch_map), str(report_path))
        r2 = coverage_mod.run_coverage(str(binary), ["7f"], str(branch_map), str(report_path),
                                       merge=True)
        assert r2.covered >= r1.covered  # merge is monotone
        r3 = coverage_mod.run_coverage(str(binary), ["3c0"], str(branch_map), str(report_path),
                                       merge=True)
        assert r3.covered == 20
        assert r3.branch_coverage == 1.0

    def test_report_roundtrip(self, fixtures, tmp_path):
        binary, branch_map = make_branch_map(fixtures, tmp_path)
        report_path = tmp_path / "cov.txt"
        report = coverage_mod.run_coverage(str(binary), ["0"], str(branch_map), str(report_path))
        loaded = coverage_mod.read_report(str(report_path))
        assert loaded.covered == report.covered
        text = report_path.read_text()
        assert text.strip().endswith(f"coverage={report.branch_coverage!r}")

    def test_empty_map_is_vacuous_full_coverage(self, fixtures, tmp_path):
        binary = fixtures.build("branches10.c")
        empty = tmp_path / "empty.map"
        empty.write_text("# nothing\n")
        report = coverage_mod.run_coverage(str(binary), ["0"], str(empty),
                                           str(tmp_path / "out.txt"))
        assert report.branch_coverage == 1.0
        assert report.warnings

    def test_malformed_map_line(self, tmp_path):
        bad = tmp_path / "bad.map"
        bad.write_text("4011d6 401200\n")
        with pytest.raises(MapFormatError) as exc:
            coverage_mod.parse_branch_map(str(bad))
        assert exc.value.line_number == 1

    def test_equal_targets_rejected(self, tmp_path):
        bad = tmp_path / "bad.map"
        bad.write_text("4011d6 401200 401200\n")
        with pytest.raises(MapFormatError):
            coverage_mod.parse_branch_map(str(bad))


class TestTriageTool:
    def test_overflow_offsets(self, fixtures):
        overflow = fixtures.build("overflow.c")
        insns = objdump_function(overflow, "vuln")
        # Disassembly oracle: the buffer really is 64 bytes below the frame base.
        assert any(i.mnemonic == "lea" and "-0x40(%rbp)" in i.operands for i in insns)
        finding = triage_mod.run_triage(str(overflow), b"A" * 96)
        assert finding.faulting_signal == signal.SIGSEGV
        assert finding.fp_clobbered and finding.offset_to_fp == 64
        assert finding.pc_clobbered and finding.offset_to_pc == 72
        assert finding.crash_symbol == "vuln"

    def test_offsets_deterministic(self, fixtures):
        overflow = fixtures.build("overflow.c")
        results = {(f.offset_to_fp, f.offset_to_pc)
                   for f in (triage_mod.run_triage(str(overflow), b"B" * 100) for _ in range(3))}
        assert results == {(64, 72)}

    def test_benign_input_no_crash(self, fixtures):
        overflow = fixtures.build("overflow.c")
        with pytest.raises(NoCrash):
            triage_mod.run_triage(str(overflow), b"hello\n")

    def test_stack_trace_names_vulnerable_function(self, fixtures):
        overflow = fixtures.build("overflow.c")
        finding = triage_mod.run_triage(str(overflow), b"A" * 96)
        assert finding.stack_trace
        assert finding.stack_trace[0].symbol[0] == "vuln"
        assert "vuln" in finding.summary()


class TestBenchTool:
    def test_breakpoint_mode_counts_and_csv(self, tmp_path):
        csv_path = tmp_path / "bench.csv"
        result = bench_mod.run_bench(bench_mod.MODE_BREAKPOINT, events=100, runs=5,
                                     out_csv=str(csv_path))
        assert result.events_observed == 500
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "run,wall_ns"
        assert len(lines) == 6
        recomputed = sorted(int(l.split(",")[1]) for l in lines[1:])
        import statistics

        assert statistics.median(recomputed) == result.median_ns
        stats_text = (tmp_path / "bench.csv.stats").read_text()
        assert f"median_ns={result.median_ns!r}" in stats_text

    def test_syscall_mode_two_stops_per_call(self, tmp_path):
        result = bench_mod.run_bench(bench_mod.MODE_SYSCALL, events=50, runs=3,
                                     out_csv=str(tmp_path / "s.csv"))
        assert result.events_observed == 150  # enter+exit pairs counted as one event

    @pytest.mark.skipif(shutil.which("gdb") is None, reason="no external gdb")
    def test_gdb_comparison_produces_ratio(self, tmp_path):
        result = bench_mod.run_bench(bench_mod.MODE_BREAKPOINT, events=100, runs=3,
                                     out_csv=str(tmp_path / "g.csv"),
                                     compare_gdb=True, gdb_runs=2)
        assert result.median_ratio is not None
        assert result.median_ratio > 0


class TestCli:
    def run_cli(self, *args):
        from scriptdbg.tools.cli import main

        return main(list(args))

    def test_trace_cli(self, fixtures, tmp_path, capsys):
        stepper = fixtures.build("stepper.S", freestanding=True)
        log = tmp_path / "trace.log"
        status = self.run_cli("trace", str(stepper), "--filter", "write",
                              "--output", str(log))
        assert status == 0
        assert len(log.read_text().splitlines()) == 1

    def test_trace_cli_bad_filter(self, fixtures, capsys):
        stepper = fixtures.build("stepper.S", freestanding=True)
        assert self.run_cli("trace", str(stepper), "--filter", "bogus") == 1

    def test_coverage_cli(self, fixtures, tmp_path, capsys):
        binary, branch_map = make_branch_map(fixtures, tmp_path)
        status = self.run_cli("coverage", str(binary), "0",
                              "--branch-map", str(branch_map),
                              "--report", str(tmp_path / "r.txt"))
        assert status == 0
        assert "coverage=0.35" in capsys.readouterr().out

    def test_triage_cli(self, fixtures, tmp_path, capsys):
        overflow = fixtures.build("overflow.c")
        payload = tmp_path / "payload.bin"
        payload.write_bytes(b"A" * 96)
        status = self.run_cli("triage", str(overflow), "--payload", str(payload))
        assert status == 0
        out = capsys.readouterr().out
        assert "offset 64" in out and "offset 72" in out

    def test_triage_cli_no_crash(self, fixtures, tmp_path, capsys):
        overflow = fixtures.build("overflow.c")
        payload = tmp_path / "payload.bin"
        payload.write_bytes(b"ok\n")
        assert self.run_cli("triage", str(overflow), "--payload", str(payload)) == 1

    def test_bench_cli(self, tmp_path, capsys):
        status = self.run_cli("bench", "--mode", "breakpoint", "--events", "50",
                              "--runs", "2", "--out", str(tmp_path / "b.csv"))
        assert status == 0
        assert "median=" in capsys.readouterr().out

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as exc:
            self.run_cli("frobnicate")
        assert exc.value.code == 2
