import os
import re
import subprocess

import pytest

from scriptdbg import (
    ALL,
    Debuggee,
    FaultRule,
    StdioMode,
    StopKind,
    syscall_number,
)
from scriptdbg.errors import InvalidContext, RuleConflict, UnknownSyscall


@pytest.fixture(scope="module")
def writes50(fixtures):
    return fixtures.build("writes50.c", freestanding=True)


@pytest.fixture(scope="module")
def oracle_tracer(fixtures):
    return fixtures.build("oracle_tracer.c", out_name="oracle_tracer")


def oracle_trace(tracer, target) -> list[tuple[int, str]]:
    """(nr, ret-or-'?') sequence from the independent C tracer."""
    proc = subprocess.run([str(tracer), str(target)], capture_output=True,
                          text=True, timeout=60, check=True)
    out = []
    for line in proc.stdout.splitlines():
        nr_s, ret_s = line.split()
        out.append((int(nr_s), ret_s))
    return out


def host_header_syscall_names() -> dict[int, str]:
    """nr -> name derived from the kernel header, independent of the engine table."""
    header = "/usr/include/x86_64-linux-gnu/asm/unistd_64.h"
    names = {}
    with open(header) as f:
        for line in f:
            m = re.match(r"#define\s+__NR_(\w+)\s+(\d+)\s*$", line)
            if m:
                names[int(m.group(2))] = m.group(1)
    return names


class TestTracing:
    def test_write_records_match_independent_tracer(self, writes50, oracle_tracer):
        records = []
        with Debuggee.spawn(str(writes50), stdio=StdioMode.PIPE) as dbg:
            nr_write = syscall_number(dbg.arch, "write")
            dbg.trace_syscalls("write",
                               on_exit=lambda d, c: records.append((c.record.name, c.record.ret)))
            dbg.run_until_exit()
        oracle_names = host_header_syscall_names()
        expected = [(oracle_names[nr], int(ret)) for nr, ret in
                    oracle_trace(oracle_tracer, writes50) if nr == nr_write]
        assert len(records) == 50
        assert records == expected

    def test_full_sequence_matches_independent_tracer(self, writes50, oracle_tracer):
        mine = []

        def on_enter(d, c):
            mine.append([c.record.nr, None])

        def on_exit(d, c):
            mine[-1][1] = str(c.record.ret)

        with Debuggee.spawn(str(writes50), stdio=StdioMode.PIPE) as dbg:
            dbg.trace_syscalls(ALL, on_enter=on_enter, on_exit=on_exit)
            dbg.run_until_exit()
        mine = [(nr, ret if ret is not None else "?") for nr, ret in mine]
        assert mine == oracle_trace(oracle_tracer, writes50)

    def test_known_write_returns_two(self, fixtures):
        stepper = fixtures.build("stepper.S", freestanding=True)
        enters, exits = [], []
        with Debuggee.spawn(str(stepper), stdio=StdioMode.PIPE) as dbg:
            nr_write = syscall_number(dbg.arch, "write")
            dbg.trace_syscalls("write",
                               on_enter=lambda d, c: enters.append(c.record.nr),
                               on_exit=lambda d, c: exits.append(c.record.ret))
            dbg.run_until_exit()
            assert dbg.stdout_read() == b"hi"
        assert enters == [nr_write]
        assert exits == [2]

    def test_unknown_syscall_name(self, writes50):
        with Debuggee.spawn(str(writes50), stdio=StdioMode.PIPE) as dbg:
            with pytest.raises(UnknownSyscall):
                dbg.trace_syscalls("notasyscall")

    def test_enter_exit_alternation_per_thread(self, writes50):
        directions = []
        with Debuggee.spawn(str(writes50), stdio=StdioMode.PIPE) as dbg:
            dbg.trace_syscalls(ALL,
                               on_enter=lambda d, c: directions.append("E"),
                               on_exit=lambda d, c: directions.append("X"))
            dbg.run_until_exit()
        trace = "".join(directions)
        assert re.fullmatch(r"(EX)*E?", trace)

    def test_event_seq_gapless(self, writes50):
        seqs = []
        with Debuggee.spawn(str(writes50), stdio=StdioMode.PIPE) as dbg:
            dbg.trace_syscalls("write")
            while True:
                ev = dbg.wait_event()
                seqs.append(ev.seq)
                if ev.reason.kind is StopKind.EXITED:
                    break
        assert seqs == list(range(1, len(seqs) + 1))


class TestHijack:
    def test_rewrite_path_argument(self, fixtures, tmp_path):
        opencat = fixtures.build("opencat.c")
        (tmp_path / "fileA.txt").write_text("AAA")
        (tmp_path / "fileB.txt").write_text("BBB")
        cwd = os.getcwd()
        os.chdir(tmp_path)
        try:
            with Debuggee.spawn(str(opencat), stdio=StdioMode.PIPE) as dbg:
                scratch = dbg.resolve_symbol("g_scratch")

                def on_enter(d, ctx):
                    # The loader issues openat calls too; only rewrite the
                    # fixture's own one.
                    path = d.read_memory(ctx.record.args[1], 16)
                    if not path.startswith(b"fileA.txt\x00"):
                        return
                    d.write_memory(scratch, b"fileB.txt\x00")
                    d.hijack_syscall(ctx, new_args={1: scratch})

                dbg.trace_syscalls("openat", on_enter=on_enter)
                status = dbg.run_until_exit()
                out = dbg.stdout_read()
        finally:
            os.chdir(cwd)
        assert status == 0
        assert out == b"content=BBB\n"

    def test_hijack_nr_to_noop_prevents_side_effect(self, fixtures, tmp_path):
        # Static build: the only openat in the process is the fixture's own.
        creator = fixtures.build("creator.c", static=True)
        cwd = os.getcwd()
        os.chdir(tmp_path)
        try:
            exit_nrs = []
            with Debuggee.spawn(str(creator), stdio=StdioMode.PIPE) as dbg:
                sched_yield = syscall_number(dbg.arch, "sched_yield")
                dbg.trace_syscalls("openat",
                                   on_enter=lambda d, c: d.hijack_syscall(c, new_nr="sched_yield"),
                                   on_exit=lambda d, c: exit_nrs.append(c.record.nr))
                dbg.run_until_exit()
            assert not (tmp_path / "created.txt").exists()
            assert exit_nrs and all(nr == sched_yield for nr in exit_nrs)
        finally:
            os.chdir(cwd)

    def test_hijack_from_exit_handler_rejected(self, fixtures):
        stepper = fixtures.build("stepper.S", freestanding=True)
        errors = []

        def on_exit(d, ctx):
            try:
                d.hijack_syscall(ctx, new_nr="sched_yield")
            except InvalidContext as exc:
                errors.append(exc)

        with Debuggee.spawn(str(stepper), stdio=StdioMode.PIPE) as dbg:
            dbg.trace_syscalls("write", on_exit=on_exit)
            dbg.run_until_exit()
        assert errors


class TestFaultInjection:
    def test_first_openat_gets_eacces(self, fixtures):
        target = fixtures.build("openprobe.c", static=True)
        with Debuggee.spawn(str(target), stdio=StdioMode.PIPE) as dbg:
            dbg.inject_fault(FaultRule(syscall="openat", errno_value=13, nth=1))
            status = dbg.run_until_exit()
            out = dbg.stdout_read()
        assert status == 2
        assert out == b"config: permission denied\n"

    def test_all_matching_mmaps_fail(self, fixtures):
        target = fixtures.build("mmap_probe.c", freestanding=True)
        with Debuggee.spawn(str(target), stdio=StdioMode.PIPE) as dbg:
            dbg.inject_fault(FaultRule(syscall="mmap", errno_value=12, nth=ALL))
            dbg.run_until_exit()
            out = dbg.stdout_read()
        assert out == b"alloc failed\n" * 3

    def test_arg_predicate_narrows_rule(self, fixtures):
        target = fixtures.build("mmap_probe.c", freestanding=True)
        with Debuggee.spawn(str(target), stdio=StdioMode.PIPE) as dbg:
            dbg.inject_fault(FaultRule(syscall="mmap", errno_value=12, nth=ALL,
                                       arg_predicate=lambda args: args[1] == 4096))
            dbg.run_until_exit()
            out = dbg.stdout_read()
        assert out == b"alloc ok\n" * 3  # fixture maps 8192, predicate never matches

    def test_injected_record_flagged(self, fixtures):
        target = fixtures.build("openprobe.c", static=True)
        flagged = []
        with Debuggee.spawn(str(target), stdio=StdioMode.PIPE) as dbg:
            dbg.inject_fault(FaultRule(syscall="openat", errno_value=13, nth=1))
            dbg.trace_syscalls("openat",
                               on_exit=lambda d, c: flagged.append((c.record.injected, c.record.ret)))
            dbg.run_until_exit()
        assert flagged == [(True, -13)]

    def test_zero_errno_rejected(self, fixtures):
        target = fixtures.build("openprobe.c", static=True)
        with Debuggee.spawn(str(target), stdio=StdioMode.PIPE) as dbg:
            with pytest.raises(RuleConflict):
                dbg.inject_fault(FaultRule(syscall="openat", errno_value=0, nth=1))

    def test_conflicting_rule_rejected(self, fixtures):
        target = fixtures.build("openprobe.c", static=True)
        with Debuggee.spawn(str(target), stdio=StdioMode.PIPE) as dbg:
            dbg.inject_fault(FaultRule(syscall="openat", errno_value=13, nth=1))
            with pytest.raises(RuleConflict):
                dbg.inject_fault(FaultRule(syscall="openat", errno_value=2, nth=ALL))

    def test_rule_consumed_after_firing(self, fixtures):
        target = fixtures.build("openprobe.c", static=True)
        rule = FaultRule(syscall="openat", errno_value=13, nth=1)
        with Debuggee.spawn(str(target), stdio=StdioMode.PIPE) as dbg:
            dbg.inject_fault(rule)
            dbg.run_until_exit()
        assert rule.consumed

    def test_determinism_across_runs(self, fixtures):
        target = fixtures.build("openprobe.c", static=True)
        outputs = set()
        for _ in range(20):
            with Debuggee.spawn(str(target), stdio=StdioMode.PIPE) as dbg:
                dbg.inject_fault(FaultRule(syscall="openat", errno_value=13, nth=1))
                status = dbg.run_until_exit()
                outputs.add((status, dbg.stdout_read()))
        assert outputs == {(2, b"config: permission denied\n")}
