import os
import random
import signal
import subprocess
import time

import pytest

from scriptdbg import (
    LifecycleState,
    NoticeKind,
    PtraceBackend,
    ResumeMode,
    StdioMode,
)
from scriptdbg.errors import (
    InvalidState,
    MemoryAccessError,
    NoSuchProcess,
    NoSuchThread,
    SpawnError,
)

from .conftest import nm_symbols, readelf_entry, run_bare


@pytest.fixture
def backend():
    return PtraceBackend()


def spawn_and_kill(backend, path, *args, **kw):
    h = backend.spawn(str(path), list(args), **kw)
    yield h


def drain_to_exit(backend, h):
    backend.resume(h)
    while True:
        n = backend.wait_notice(h)
        if n.kind is NoticeKind.EXIT:
            return n
        backend.resume(h)


class TestSpawn:
    def test_minimal_target(self, backend):
        h = backend.spawn("/bin/true")
        assert h.state is LifecycleState.STOPPED
        assert h.tids == [h.pid]
        backend.kill(h)

    def test_missing_file(self, backend):
        with pytest.raises(SpawnError):
            backend.spawn("/nonexistent")

    def test_not_executable(self, backend, tmp_path):
        p = tmp_path / "plain.txt"
        p.write_text("hello")
        with pytest.raises(SpawnError):
            backend.spawn(str(p))

    def test_cmdline_visible_in_procfs(self, backend, fixtures):
        argdump = fixtures.build("argdump.c")
        h = backend.spawn(str(argdump), ["A", "B"])
        cmdline = open(f"/proc/{h.pid}/cmdline", "rb").read()
        assert b"argdump\x00A\x00B\x00" in cmdline
        notice = drain_to_exit(backend, h)
        assert notice.exit_code == 0

    def test_spawn_stop_pc_at_entry_point(self, backend, fixtures):
        stepper = fixtures.build("stepper.S", freestanding=True)
        h = backend.spawn(str(stepper))
        regs = backend.read_registers(h, h.pid)
        assert regs.pc == readelf_entry(stepper)
        backend.kill(h)


class TestLifecycle:
    def test_true_runs_to_exit(self, backend):
        h = backend.spawn("/bin/true")
        backend.resume(h)
        notice = backend.wait_notice(h)
        assert notice.kind is NoticeKind.EXIT
        assert notice.exit_code == 0
        assert h.state is LifecycleState.EXITED
        assert h.exit_code == 0

    def test_exit_code_only_when_exited(self, backend):
        h = backend.spawn("/bin/true")
        assert h.exit_code is None
        backend.kill(h)
        assert h.state is LifecycleState.KILLED
        assert h.exit_code is None
        assert h.term_signal == signal.SIGKILL

    def test_kill_reaps_no_zombie(self, backend):
        h = backend.spawn("/bin/cat", stdio=StdioMode.PIPE)
        backend.kill(h)
        assert h.state is LifecycleState.KILLED
        assert not os.path.isdir(f"/proc/{h.pid}")

    def test_kill_stopped_tracee(self, backend):
        h = backend.spawn("/bin/sleep", ["30"])
        assert h.state is LifecycleState.STOPPED
        backend.kill(h)
        assert h.state is LifecycleState.KILLED

    def test_kill_after_exit_invalid(self, backend):
        h = backend.spawn("/bin/true")
        drain_to_exit(backend, h)
        with pytest.raises(InvalidState):
            backend.kill(h)

    def test_detach_twice_invalid(self, backend):
        h = backend.spawn("/bin/sleep", ["30"])
        backend.detach(h)
        try:
            with pytest.raises(InvalidState):
                backend.detach(h)
        finally:
            os.kill(h.pid, signal.SIGKILL)
            os.waitpid(h.pid, 0)

    def test_detach_while_running_invalid(self, backend):
        h = backend.spawn("/bin/sleep", ["30"])
        backend.resume(h)
        with pytest.raises(InvalidState):
            backend.detach(h)
        os.kill(h.pid, signal.SIGKILL)
        while h.tids:
            try:
                n = backend.wait_notice(h)
                if n.kind is NoticeKind.EXIT:
                    break
            except Exception:
                break

    def test_detached_target_runs_to_clean_exit(self, backend, fixtures):
        loop = fixtures.build("loop.c")
        bare = run_bare(loop, ["100"])
        h = backend.spawn(str(loop), ["100"], stdio=StdioMode.PIPE)
        out_fd = h.stdout_fd
        backend.detach(h)
        _, status = os.waitpid(h.pid, 0)
        assert os.WIFEXITED(status) and os.WEXITSTATUS(status) == 0
        os.set_blocking(out_fd, True)
        data = b""
        while True:
            chunk = os.read(out_fd, 4096)
            if not chunk:
                break
            data += chunk
        assert data == bare.stdout

    def test_resume_deliver_sigterm_kills_default_disposition(self, backend):
        h = backend.spawn("/bin/sleep", ["30"])
        backend.resume(h)
        time.sleep(0.05)
        os.kill(h.pid, signal.SIGTERM)
        notice = backend.wait_notice(h)
        assert notice.kind is NoticeKind.SIGNAL and notice.signo == signal.SIGTERM
        backend.resume(h, deliver={h.pid: signal.SIGTERM})
        notice = backend.wait_notice(h)
        assert notice.kind is NoticeKind.EXIT
        assert notice.exit_code == -signal.SIGTERM
        assert h.state is LifecycleState.KILLED


class TestAttach:
    def test_attach_sleeping_child(self, backend):
        child = subprocess.Popen(["/bin/sleep", "30"])
        try:
            time.sleep(0.05)
            h = backend.attach(child.pid)
            assert h.state is LifecycleState.STOPPED
            assert h.tids == [child.pid]
            backend.detach(h)
        finally:
            child.kill()
            child.wait()

    def test_attach_enumerates_extra_threads(self, backend, fixtures):
        target = fixtures.build("threads_wait.c", pthread=True)
        child = subprocess.Popen([str(target)], stdout=subprocess.PIPE)
        try:
            child.stdout.readline()  # "threads up"
            h = backend.attach(child.pid)
            assert len(h.tids) == 4
            backend.detach(h)
        finally:
            child.kill()
            child.wait()

    def test_attach_bad_pid(self, backend):
        with pytest.raises(NoSuchProcess):
            backend.attach(-1)


class TestRegisters:
    def test_roundtrip_gp_register(self, backend):
        h = backend.spawn("/bin/sleep", ["30"])
        regs = backend.read_registers(h, h.pid)
        regs["r15" if h.arch.name == "amd64" else "x15"] = 0x1122334455667788
        backend.write_registers(h, h.pid, regs)
        back = backend.read_registers(h, h.pid)
        assert back["r15" if h.arch.name == "amd64" else "x15"] == 0x1122334455667788
        backend.kill(h)

    def test_unknown_tid(self, backend):
        h = backend.spawn("/bin/sleep", ["30"])
        with pytest.raises(NoSuchThread):
            backend.read_registers(h, 999999)
        backend.kill(h)

    def test_read_while_running_invalid(self, backend):
        h = backend.spawn("/bin/sleep", ["30"])
        backend.resume(h)
        with pytest.raises(InvalidState):
            backend.read_registers(h, h.pid)
        backend.kill(h)

    def test_pc_zero_faults(self, backend):
        h = backend.spawn("/bin/sleep", ["30"])
        regs = backend.read_registers(h, h.pid)
        regs.pc = 0
        backend.write_registers(h, h.pid, regs)
        backend.resume(h)
        notice = backend.wait_notice(h)
        assert notice.kind is NoticeKind.SIGNAL
        assert notice.signo == signal.SIGSEGV
        backend.kill(h)

    def test_unmodified_write_is_noop(self, backend):
        h = backend.spawn("/bin/sleep", ["30"])
        regs = backend.read_registers(h, h.pid)
        backend.write_registers(h, h.pid, regs)
        assert backend.read_registers(h, h.pid) == regs
        backend.kill(h)

    def test_register_roundtrip_randomized(self, backend):
        h = backend.spawn("/bin/sleep", ["30"])
        rng = random.Random(0xBEEF)
        scratch = ["rax", "rbx", "rcx", "rdx", "rsi", "rdi", "r8", "r9",
                   "r10", "r11", "r12", "r13", "r14", "r15"]
        for _ in range(1000):
            reg = rng.choice(scratch)
            value = rng.getrandbits(64)
            regs = backend.read_registers(h, h.pid)
            regs[reg] = value
            backend.write_registers(h, h.pid, regs)
            assert backend.read_registers(h, h.pid)[reg] == value
        backend.kill(h)


class TestMemory:
    @pytest.fixture
    def stopped_globals(self, backend, fixtures):
        target = fixtures.build("globals.c")
        h = backend.spawn(str(target), stdio=StdioMode.PIPE)
        buf_addr = nm_symbols(target)["g_buffer"][0]
        yield backend, h, buf_addr
        if h.state not in (LifecycleState.EXITED, LifecycleState.KILLED):
            backend.kill(h)

    def test_roundtrip_small(self, stopped_globals):
        backend, h, addr = stopped_globals
        backend.write_memory_raw(h, addr, b"\xde\xad\xbe\xef")
        assert backend.read_memory_raw(h, addr, 4) == b"\xde\xad\xbe\xef"

    def test_zero_length(self, stopped_globals):
        backend, h, addr = stopped_globals
        assert backend.read_memory_raw(h, addr, 0) == b""

    def test_entry_bytes_match_file(self, backend, fixtures):
        stepper = fixtures.build("stepper.S", freestanding=True)
        from scriptdbg import parse_elf

        info = parse_elf(str(stepper))
        entry = info.entry
        seg = next(s for s in info.load_segments if s[0] <= entry < s[0] + s[2])
        file_off = seg[1] + (entry - seg[0])
        file_bytes = stepper.read_bytes()[file_off : file_off + 16]
        h = backend.spawn(str(stepper))
        assert backend.read_memory_raw(h, entry, 16) == file_bytes
        backend.kill(h)

    def test_unmapped_read_reports_fault_address(self, stopped_globals):
        backend, h, _ = stopped_globals
        with pytest.raises(MemoryAccessError) as exc:
            backend.read_memory_raw(h, 0x20, 8)
        assert exc.value.address >= 0x20

    def test_unmapped_write_fails(self, stopped_globals):
        backend, h, _ = stopped_globals
        with pytest.raises(MemoryAccessError):
            backend.write_memory_raw(h, 0x20, b"x" * 32)

    def test_roundtrip_randomized(self, stopped_globals):
        backend, h, base = stopped_globals
        rng = random.Random(0xD00D)
        for _ in range(1000):
            length = rng.randrange(0, 4097)
            offset = rng.randrange(0, 8192 - 4096)
            data = rng.randbytes(length)
            backend.write_memory_raw(h, base + offset, data)
            assert backend.read_memory_raw(h, base + offset, length) == data


class TestStepAndSyscall:
    def test_single_step_advances_by_known_lengths(self, backend, fixtures):
        stepper = fixtures.build("stepper.S", freestanding=True)
        from .conftest import objdump_function

        h = backend.spawn(str(stepper))
        insns = objdump_function(stepper, "_start")
        assert [i.mnemonic for i in insns[:3]] == ["nop", "nop", "nop"]
        pc = backend.read_registers(h, h.pid).pc
        assert pc == insns[0].addr
        for insn in insns[:3]:
            backend.single_step(h, h.pid)
            notice = backend.wait_notice(h)
            assert notice.kind is NoticeKind.STEP
            pc = backend.read_registers(h, h.pid).pc
            assert pc == insn.addr + insn.size  # nop is 1 byte: +1 each
        assert pc == insns[0].addr + 3
        backend.kill(h)

    def test_first_syscall_stop_is_write(self, backend, fixtures):
        stepper = fixtures.build("stepper.S", freestanding=True)
        h = backend.spawn(str(stepper), stdio=StdioMode.PIPE)
        backend.resume(h, ResumeMode.SYSCALL_STOP)
        notice = backend.wait_notice(h)
        assert notice.kind is NoticeKind.SYSCALL_TRAP
        regs = backend.read_registers(h, h.pid)
        from scriptdbg import syscall_number

        assert regs.syscall_nr == syscall_number(h.arch, "write")
        backend.kill(h)

    def test_clone_notice_precedes_new_tid_events(self, backend, fixtures):
        target = fixtures.build("threads4.c", pthread=True)
        h = backend.spawn(str(target), stdio=StdioMode.PIPE)
        backend.resume(h)
        seen_tids = {h.pid}
        clone_order_ok = True
        while True:
            notice = backend.wait_notice(h)
            if notice.kind is NoticeKind.EXIT:
                break
            if notice.kind is NoticeKind.CLONE:
                seen_tids.add(notice.new_tid)
                assert notice.new_tid in h.tids
            elif notice.tid not in seen_tids:
                clone_order_ok = False
            backend.resume(h)
        assert clone_order_ok


class TestLifecycleProperty:
    """Random operation sequences can never corrupt the state machine."""

    OPS = ("resume", "wait", "kill", "detach", "read_regs", "step", "spawnless_noop")

    def run_sequence(self, backend, fixtures, seed: int) -> None:
        rng = random.Random(seed)
        spin = fixtures.build("spin.c")
        h = backend.spawn(str(spin), stdio=StdioMode.PIPE)
        alive = True
        try:
            for _ in range(12):
                op = rng.choice(self.OPS)
                state = h.state
                try:
                    if op == "resume":
                        backend.resume(h)
                        assert state is LifecycleState.STOPPED
                    elif op == "wait":
                        if state is LifecycleState.RUNNING:
                            os.kill(h.pid, signal.SIGUSR1)  # guarantee a stop
                            backend.wait_notice(h)
                            assert h.state is LifecycleState.STOPPED
                        else:
                            with pytest.raises(InvalidState):
                                backend.wait_notice(h)
                    elif op == "kill":
                        backend.kill(h)
                        assert h.state is LifecycleState.KILLED
                        alive = False
                        break
                    elif op == "detach":
                        if state is LifecycleState.STOPPED:
                            backend.detach(h)
                            alive = False
                            break
                        else:
                            with pytest.raises(InvalidState):
                                backend.detach(h)
                    elif op == "read_regs":
                        if state is LifecycleState.STOPPED:
                            backend.read_registers(h, h.pid)
                        else:
                            with pytest.raises(InvalidState):
                                backend.read_registers(h, h.pid)
                    elif op == "step":
                        if state is LifecycleState.STOPPED:
                            backend.single_step(h, h.pid)
                            backend.wait_notice(h)
                            assert h.state is LifecycleState.STOPPED
                        else:
                            with pytest.raises(InvalidState):
                                backend.single_step(h, h.pid)
                    assert h.state in LifecycleState
                except (InvalidState,):
                    assert h.state is state  # failed ops never corrupt state
        finally:
            if alive:
                backend.kill(h)
            else:
                try:
                    os.kill(h.pid, signal.SIGKILL)
                    os.waitpid(h.pid, 0)
                except (ProcessLookupError, ChildProcessError):
                    pass

    def test_random_op_sequences(self, backend, fixtures):
        for seed in range(30):
            self.run_sequence(backend, fixtures, 0xC0FFEE + seed)
