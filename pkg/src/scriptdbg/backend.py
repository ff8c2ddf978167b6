"""Native debug transport: process control through ptrace.

`DebugBackend` is the abstract contract; `PtraceBackend` is the Linux
implementation. The backend deals in *raw* stop notices (undecoded beyond
the wait-status level) and enforces the lifecycle state machine and the
all-stop discipline: by the time `wait_notice` returns, every thread of the
tracee is halted. Anything smarter (breakpoint identification, syscall
records, signal policy) lives above.
"""

from __future__ import annotations

import enum
import errno as _errno
import os
import signal
import stat
from abc import ABC, abstractmethod
from dataclasses import dataclass

from . import ptrace
from .arch import AMD64, AMD64_DEBUGREG_OFFSET, ArchSpec, detect_arch
from .errors import (
    InvalidState,
    MemoryAccessError,
    NoSuchProcess,
    NoSuchThread,
    ProcessLost,
    SpawnError,
)
from .model import RegisterFile

KEEP_ASLR_ENV = "SCRIPTDBG_KEEP_ASLR"

_TRACE_OPTIONS = (
    ptrace.O_TRACESYSGOOD
    | ptrace.O_TRACECLONE
    | ptrace.O_TRACEEXEC
    | ptrace.O_EXITKILL
)


class LifecycleState(enum.Enum):
    CREATED = "created"
    STOPPED = "stopped"
    RUNNING = "running"
    EXITED = "exited"
    KILLED = "killed"


class ResumeMode(enum.Enum):
    CONTINUE = "continue"
    SYSCALL_STOP = "syscall_stop"


class StdioMode(enum.Enum):
    PIPE = "pipe"
    INHERIT = "inherit"


class NoticeKind(enum.Enum):
    SIGNAL = "signal"
    SYSCALL_TRAP = "syscall_trap"
    EXEC = "exec"
    CLONE = "clone"
    EXIT = "exit"
    STEP = "step"


@dataclass(frozen=True)
class RawStopNotice:
    """Undecoded stop report for one thread."""

    tid: int
    kind: NoticeKind
    signo: int | None = None
    new_tid: int | None = None
    exit_code: int | None = None  # negative signo when signal-terminated


@dataclass
class _ThreadState:
    running: bool = False
    # SIGSTOPs we caused (stop-the-world, clone birth) that must be swallowed
    # rather than reported.
    owed_sigstops: int = 0
    awaiting_birth_stop: bool = False


class TraceeHandle:
    """Identity and lifecycle of one traced process."""

    def __init__(self, pid: int, arch: ArchSpec, aslr_disabled: bool, attached: bool):
        self.pid = pid
        self.arch = arch
        self.aslr_disabled = aslr_disabled
        self.attached = attached
        self.state = LifecycleState.CREATED
        self.exit_code: int | None = None
        self.term_signal: int | None = None
        self.tids: list[int] = []
        # stdio pipe fds held by the tracer (None unless spawned with PIPE)
        self.stdin_fd: int | None = None
        self.stdout_fd: int | None = None
        self.stderr_fd: int | None = None
        # internals
        self._threads: dict[int, _ThreadState] = {}
        self._queued: list[RawStopNotice] = []
        self._orphan_stops: dict[int, int] = {}  # stops seen before their CLONE notice
        self._step_tids: set[int] = set()
        self._last_mode = ResumeMode.CONTINUE
        # True between a full resume and the next wait; governs whether a
        # swallowed stop-the-world signal puts the thread back into motion.
        self._world_running = False
        self._pid_status: int | None = None
        self._closed = False
        self._hw_debug_ok: bool | None = None

    def __repr__(self) -> str:
        return f"<TraceeHandle pid={self.pid} {self.arch.name} {self.state.value}>"

    def _add_tid(self, tid: int, running: bool) -> None:
        if tid not in self._threads:
            self.tids.append(tid)
            self._threads[tid] = _ThreadState(running=running)

    def _drop_tid(self, tid: int) -> None:
        self._threads.pop(tid, None)
        if tid in self.tids:
            self.tids.remove(tid)


class DebugBackend(ABC):
    """Abstract debug transport; one implementation per native debug API."""

    @abstractmethod
    def spawn(self, path: str, argv: list[str] | None = None, env: dict[str, str] | None = None,
              stdio: StdioMode = StdioMode.PIPE, disable_aslr: bool | None = None) -> TraceeHandle: ...

    @abstractmethod
    def attach(self, pid: int) -> TraceeHandle: ...

    @abstractmethod
    def detach(self, h: TraceeHandle) -> None: ...

    @abstractmethod
    def kill(self, h: TraceeHandle) -> None: ...

    @abstractmethod
    def read_registers(self, h: TraceeHandle, tid: int) -> RegisterFile: ...

    @abstractmethod
    def write_registers(self, h: TraceeHandle, tid: int, regs: RegisterFile) -> None: ...

    @abstractmethod
    def read_memory_raw(self, h: TraceeHandle, addr: int, length: int) -> bytes: ...

    @abstractmethod
    def write_memory_raw(self, h: TraceeHandle, addr: int, data: bytes) -> None: ...

    @abstractmethod
    def resume(self, h: TraceeHandle, mode: ResumeMode = ResumeMode.CONTINUE,
               deliver: dict[int, int] | None = None) -> None: ...

    @abstractmethod
    def single_step(self, h: TraceeHandle, tid: int) -> None: ...

    @abstractmethod
    def wait_notice(self, h: TraceeHandle) -> RawStopNotice: ...


class PtraceBackend(DebugBackend):
    """ptrace-based transport for Linux."""

    # -- lifecycle ---------------------------------------------------------

    def spawn(self, path, argv=None, env=None, stdio=StdioMode.PIPE, disable_aslr=None):
        argv = list(argv or [])
        if disable_aslr is None:
            disable_aslr = os.environ.get(KEEP_ASLR_ENV, "") != "1"
        try:
            st = os.stat(path)
        except OSError:
            raise SpawnError(f"no such file: {path}")
        if not stat.S_ISREG(st.st_mode) or not os.access(path, os.X_OK):
            raise SpawnError(f"not an executable file: {path}")
        arch = detect_arch(path)

        child_fds = parent_fds = None
        if stdio is StdioMode.PIPE:
            stdin_r, stdin_w = os.pipe()
            stdout_r, stdout_w = os.pipe()
            stderr_r, stderr_w = os.pipe()
            child_fds = (stdin_r, stdout_w, stderr_w)
            parent_fds = (stdin_w, stdout_r, stderr_r)

        pid = os.fork()
        if pid == 0:
            try:
                os.setpgid(0, 0)
                ptrace.traceme()
                if disable_aslr:
                    ptrace.personality_no_aslr()
                if child_fds is not None:
                    for ours, theirs in zip(child_fds, range(3)):
                        os.dup2(ours, theirs)
                    for fd in child_fds + parent_fds:
                        if fd > 2:
                            os.close(fd)
                environ = dict(os.environ) if env is None else dict(env)
                os.execve(path, [path, *argv], environ)
            except BaseException:
                pass
            os._exit(127)

        if parent_fds is not None:
            for fd in child_fds:
                os.close(fd)

        handle = TraceeHandle(pid, arch, aslr_disabled=disable_aslr, attached=False)
        handle._add_tid(pid, running=True)
        if parent_fds is not None:
            handle.stdin_fd, handle.stdout_fd, handle.stderr_fd = parent_fds
            os.set_blocking(handle.stdout_fd, False)
            os.set_blocking(handle.stderr_fd, False)

        wpid, status = ptrace.waitpid_all(pid)
        if os.WIFEXITED(status):
            handle.state = LifecycleState.EXITED
            handle.exit_code = os.WEXITSTATUS(status)
            raise SpawnError(f"target failed to launch (exit {handle.exit_code})")
        ptrace.set_options(pid, _TRACE_OPTIONS)
        handle._threads[pid].running = False
        handle.state = LifecycleState.STOPPED
        return handle

    def attach(self, pid):
        if pid <= 0 or not os.path.isdir(f"/proc/{pid}"):
            raise NoSuchProcess(f"no process {pid}")
        try:
            arch = detect_arch(f"/proc/{pid}/exe")
        except OSError:
            raise NoSuchProcess(f"no process {pid}")

        handle = TraceeHandle(pid, arch, aslr_disabled=False, attached=True)
        attached: set[int] = set()
        # Threads may appear while we attach; rescan until the set is stable.
        while True:
            try:
                tids = sorted(int(t) for t in os.listdir(f"/proc/{pid}/task"))
            except OSError:
                raise NoSuchProcess(f"process {pid} vanished during attach")
            new = [t for t in tids if t not in attached]
            if not new:
                break
            for tid in new:
                try:
                    ptrace.attach(tid)
                except OSError as exc:
                    if exc.errno == _errno.EPERM:
                        raise PermissionError(f"not permitted to trace {tid}") from None
                    if exc.errno == _errno.ESRCH:
                        continue  # died between listing and attach
                    raise
                while True:
                    _, status = ptrace.waitpid_all(tid)
                    if os.WIFSTOPPED(status):
                        break
                ptrace.set_options(tid, _TRACE_OPTIONS)
                attached.add(tid)
                handle._add_tid(tid, running=False)
        if not handle.tids:
            raise NoSuchProcess(f"no traceable threads in {pid}")
        handle.state = LifecycleState.STOPPED
        return handle

    def detach(self, h: TraceeHandle) -> None:
        self._require(h, LifecycleState.STOPPED)
        for tid in list(h.tids):
            try:
                ptrace.detach(tid)
            except OSError:
                pass
        h._closed = True

    def kill(self, h: TraceeHandle) -> None:
        if h._closed or h.state is LifecycleState.EXITED:
            raise InvalidState(f"cannot kill in state {h.state.value}")
        if h.state is LifecycleState.KILLED:
            return
        import time as _time

        try:
            os.kill(h.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        # Threads parked in a ptrace-stop may need a resume to take the kill.
        for tid in list(h.tids):
            try:
                ptrace.cont(tid, signal.SIGKILL)
            except OSError:
                pass
        # Reap in whatever order deaths become reportable: the group leader's
        # status is withheld until every sibling thread has been collected.
        deadline = _time.monotonic() + 10.0
        while h.tids and _time.monotonic() < deadline:
            progressed = False
            for tid in list(h.tids):
                try:
                    res = ptrace.waitpid_all(tid, nohang=True)
                except ChildProcessError:
                    h._drop_tid(tid)
                    progressed = True
                    continue
                if res is None:
                    continue
                progressed = True
                _, status = res
                if os.WIFEXITED(status) or os.WIFSIGNALED(status):
                    h._drop_tid(tid)
                else:
                    try:
                        ptrace.cont(tid, signal.SIGKILL)
                    except OSError:
                        pass
            if not progressed:
                _time.sleep(0.001)
        h.tids.clear()
        h._threads.clear()
        h.state = LifecycleState.KILLED
        h.term_signal = signal.SIGKILL
        h._queued.clear()

    # -- registers ---------------------------------------------------------

    def read_registers(self, h: TraceeHandle, tid: int) -> RegisterFile:
        self._require_tid(h, tid)
        self._require(h, LifecycleState.STOPPED)
        size = len(h.arch.reg_names) * 8
        raw = ptrace.get_regset(tid, ptrace.NT_PRSTATUS, size)
        return RegisterFile.from_prstatus(h.arch, raw)

    def write_registers(self, h: TraceeHandle, tid: int, regs: RegisterFile) -> None:
        self._require_tid(h, tid)
        self._require(h, LifecycleState.STOPPED)
        ptrace.set_regset(tid, ptrace.NT_PRSTATUS, regs.to_prstatus())

    def set_syscall_number(self, h: TraceeHandle, tid: int, nr: int) -> None:
        """Override the syscall about to be executed at an enter stop."""
        self._require(h, LifecycleState.STOPPED)
        self._require_tid(h, tid)
        if h.arch.syscall_nr_via_regset:
            import struct

            ptrace.set_regset(tid, ptrace.NT_ARM_SYSTEM_CALL, struct.pack("<i", nr))
        else:
            regs = self.read_registers(h, tid)
            regs[h.arch.syscall_nr] = nr & ((1 << 64) - 1)
            self.write_registers(h, tid, regs)

    # -- memory ------------------------------------------------------------

    def read_memory_raw(self, h: TraceeHandle, addr: int, length: int) -> bytes:
        self._require(h, LifecycleState.STOPPED)
        if length < 0:
            raise ValueError("negative length")
        if length == 0:
            return b""
        if length > 2 * ptrace.WORD_SIZE:
            data = ptrace.vm_read(h.pid, addr, length)
            if data is not None:
                return data
        return self._read_words(h, addr, length)

    def write_memory_raw(self, h: TraceeHandle, addr: int, data: bytes) -> None:
        self._require(h, LifecycleState.STOPPED)
        if not data:
            return
        # Patch-sized writes go straight to word transfers; large ones try the
        # bulk facilities first (the proc file forces read-only pages the same
        # way ptrace pokes do).
        if len(data) > 2 * ptrace.WORD_SIZE:
            if ptrace.vm_write(h.pid, addr, data):
                return
            if ptrace.procmem_write(h.pid, addr, data):
                return
        self._write_words(h, addr, data)

    def _transfer_tid(self, h: TraceeHandle) -> int:
        """A tid currently in ptrace-stop, through which word transfers work.

        The main thread is preferred but may be mid-step in a blocking
        syscall under the emulation pump; any halted sibling serves equally
        (memory is shared process-wide).
        """
        ts = h._threads.get(h.pid)
        if ts is not None and not ts.running:
            return h.pid
        for tid, ts in h._threads.items():
            if not ts.running:
                return tid
        return h.pid

    def _read_words(self, h: TraceeHandle, addr: int, length: int) -> bytes:
        tid = self._transfer_tid(h)
        start = addr - (addr % ptrace.WORD_SIZE)
        end = addr + length
        out = bytearray()
        pos = start
        while pos < end:
            try:
                word = ptrace.peek_word(tid, pos)
            except OSError:
                raise MemoryAccessError(self._pinpoint_fault(h, max(addr, pos), end)) from None
            out += word.to_bytes(ptrace.WORD_SIZE, "little")
            pos += ptrace.WORD_SIZE
        off = addr - start
        return bytes(out[off : off + length])

    def _write_words(self, h: TraceeHandle, addr: int, data: bytes) -> None:
        tid = self._transfer_tid(h)
        end = addr + len(data)
        pos = addr - (addr % ptrace.WORD_SIZE)
        while pos < end:
            chunk_start = max(pos, addr)
            chunk_end = min(pos + ptrace.WORD_SIZE, end)
            try:
                if chunk_start == pos and chunk_end == pos + ptrace.WORD_SIZE:
                    word = int.from_bytes(data[pos - addr : pos - addr + 8], "little")
                else:
                    word = ptrace.peek_word(tid, pos)
                    buf = bytearray(word.to_bytes(ptrace.WORD_SIZE, "little"))
                    buf[chunk_start - pos : chunk_end - pos] = data[chunk_start - addr : chunk_end - addr]
                    word = int.from_bytes(buf, "little")
                ptrace.poke_word(tid, pos, word)
            except OSError:
                raise MemoryAccessError(self._pinpoint_fault(h, chunk_start, end)) from None
            pos += ptrace.WORD_SIZE

    def _pinpoint_fault(self, h: TraceeHandle, lo: int, hi: int) -> int:
        for byte_addr in range(lo, min(hi, lo + ptrace.WORD_SIZE)):
            if ptrace.procmem_read(h.pid, byte_addr, 1) is None:
                return byte_addr
        return lo

    # -- hardware debug registers -------------------------------------------

    def hw_debug_functional(self, h: TraceeHandle) -> bool:
        """Whether debug-register writes actually stick on this host.

        Virtualized kernels may accept the pokes and ignore them; a readback
        probe detects that so callers can fall back to emulation.
        """
        if h._hw_debug_ok is None:
            h._hw_debug_ok = self._probe_hw_debug(h)
        return h._hw_debug_ok

    def _probe_hw_debug(self, h: TraceeHandle) -> bool:
        if h.arch is not AMD64:
            return False  # AArch64 regset probing is wired but unverified here
        tid = h.tids[0]
        probe = 1 | (0b01 << 16) | (0b00 << 18)  # slot 0, write trigger, len 1
        try:
            ptrace.poke_user(tid, AMD64_DEBUGREG_OFFSET + 8 * 0, 0x10000)
            ptrace.poke_user(tid, AMD64_DEBUGREG_OFFSET + 8 * 7, probe)
            readback = ptrace.peek_user(tid, AMD64_DEBUGREG_OFFSET + 8 * 7)
            ptrace.poke_user(tid, AMD64_DEBUGREG_OFFSET + 8 * 7, 0)
            ptrace.poke_user(tid, AMD64_DEBUGREG_OFFSET + 8 * 0, 0)
        except OSError:
            return False
        return (readback & probe) == probe

    def write_debug_slot(self, h: TraceeHandle, tid: int, slot: int, addr: int) -> None:
        if h.arch is AMD64:
            ptrace.poke_user(tid, AMD64_DEBUGREG_OFFSET + 8 * slot, addr)

    def write_debug_control(self, h: TraceeHandle, tid: int, dr7: int) -> None:
        if h.arch is AMD64:
            ptrace.poke_user(tid, AMD64_DEBUGREG_OFFSET + 8 * 7, dr7)

    def read_debug_status(self, h: TraceeHandle, tid: int) -> int:
        if h.arch is AMD64:
            return ptrace.peek_user(tid, AMD64_DEBUGREG_OFFSET + 8 * 6)
        return 0

    def clear_debug_status(self, h: TraceeHandle, tid: int) -> None:
        if h.arch is AMD64:
            ptrace.poke_user(tid, AMD64_DEBUGREG_OFFSET + 8 * 6, 0)

    # -- execution ---------------------------------------------------------

    def resume(self, h, mode=ResumeMode.CONTINUE, deliver=None):
        self._require(h, LifecycleState.STOPPED)
        deliver = deliver or {}
        h._last_mode = mode
        h._step_tids.clear()
        h._world_running = True
        queued_tids = {n.tid for n in h._queued}
        for tid, ts in h._threads.items():
            if tid in queued_tids or ts.running or ts.awaiting_birth_stop:
                continue
            sig = deliver.get(tid, 0)
            try:
                if mode is ResumeMode.SYSCALL_STOP:
                    ptrace.syscall_resume(tid, sig)
                else:
                    ptrace.cont(tid, sig)
                ts.running = True
            except OSError as exc:
                if exc.errno != _errno.ESRCH:
                    raise
        h.state = LifecycleState.RUNNING

    def single_step(self, h: TraceeHandle, tid: int, deliver_signal: int = 0) -> None:
        self._require(h, LifecycleState.STOPPED)
        self._require_tid(h, tid)
        ptrace.singlestep(tid, deliver_signal)
        h._threads[tid].running = True
        h._step_tids.add(tid)
        h.state = LifecycleState.RUNNING

    def wait_notice(self, h: TraceeHandle) -> RawStopNotice:
        if h._queued:
            notice = h._queued.pop(0)
            h.state = LifecycleState.STOPPED
            return notice
        self._require(h, LifecycleState.RUNNING)
        while True:
            tid, status = self._wait_any(h)
            notice = self._decode(h, tid, status)
            if notice is None:
                if not h._threads and h.state in (LifecycleState.EXITED, LifecycleState.KILLED):
                    raise ProcessLost(f"tracee {h.pid} ended without a final status")
                continue
            h._world_running = False
            if notice.kind is NoticeKind.EXIT:
                return notice
            self._stop_world(h, exclude=tid)
            h.state = LifecycleState.STOPPED
            return notice

    def poll_notice(self, h: TraceeHandle, tid: int, timeout_s: float) -> RawStopNotice | None:
        """Nonblocking-ish wait for one tid; None if it reported nothing in time.

        Used by the single-step emulation pump so a thread parked in a
        blocking syscall cannot stall the world. A swallowed internal stop
        leaves the thread halted and also returns None.
        """
        import time as _time

        deadline = _time.monotonic() + timeout_s
        spins = 0
        while True:
            try:
                res = ptrace.waitpid_all(tid, nohang=True)
            except ChildProcessError:
                h._drop_tid(tid)
                return None
            if res is not None:
                notice = self._decode(h, tid, res[1])
                if notice is not None and notice.kind is not NoticeKind.EXIT:
                    h.state = LifecycleState.STOPPED
                if notice is not None:
                    return notice
                if not h._threads.get(tid, _ThreadState()).running:
                    h.state = LifecycleState.STOPPED
                    return None
                continue
            if _time.monotonic() >= deadline:
                if h._threads:
                    h.state = LifecycleState.STOPPED  # engine may service other tids
                return None
            # A requested step normally reports within tens of microseconds;
            # burn a few polls before backing off to sleeps.
            spins += 1
            if spins > 64:
                _time.sleep(0.0002)

    def stop_world(self, h: TraceeHandle, exclude: int | None = None) -> None:
        """Halt every running thread; genuine events raced into the queue."""
        self._stop_world(h, exclude=exclude if exclude is not None else -1)
        if h.state is LifecycleState.RUNNING and h._threads:
            h.state = LifecycleState.STOPPED

    def interrupt(self, h: TraceeHandle, tid: int) -> None:
        """Kick one running thread with a stop signal that will be swallowed."""
        ts = h._threads.get(tid)
        if ts is None or not ts.running:
            return
        try:
            ptrace.tgkill(h.pid, tid, signal.SIGSTOP)
            ts.owed_sigstops += 1
        except OSError:
            pass

    # -- wait/decode internals ----------------------------------------------

    def _wait_any(self, h: TraceeHandle) -> tuple[int, int]:
        """Block until any traced thread of h reports a status."""
        if not h.attached:
            # Spawned tracees sit in their own process group (child pid ==
            # pgid), so a group wait blocks without touching other children
            # of the tracer (test harnesses spawn helpers too). The next
            # event usually lands within microseconds of a resume (tight
            # breakpoint loops, syscall bursts); poll a little before
            # parking in a blocking wait.
            spins = 0
            while True:
                try:
                    res = ptrace.waitpid_all(-h.pid, nohang=spins < 64)
                except ChildProcessError:
                    raise ProcessLost(f"tracee {h.pid} vanished")
                if res is not None:
                    return res
                spins += 1
        else:
            # Attached targets are not our children; poll the known tids.
            import time

            idle = 0
            while True:
                progressed = False
                for tid in list(h.tids):
                    try:
                        res = ptrace.waitpid_all(tid, nohang=True)
                    except ChildProcessError:
                        continue
                    if res is not None:
                        return res
                    progressed = True
                if not progressed and not h.tids:
                    raise ProcessLost(f"tracee {h.pid} vanished")
                idle += 1
                if idle > 200:
                    time.sleep(0.0002)

    def _decode(self, h: TraceeHandle, tid: int, status: int) -> RawStopNotice | None:
        """Turn one wait status into a notice; None means handled internally."""
        if os.WIFEXITED(status) or os.WIFSIGNALED(status):
            if os.WIFSIGNALED(status):
                code = -os.WTERMSIG(status)
            else:
                code = os.WEXITSTATUS(status)
            if tid == h.pid:
                h._pid_status = code
            h._drop_tid(tid)
            if h.tids:
                return None  # a thread died; the process lives on
            final = h._pid_status if h._pid_status is not None else code
            if final < 0:
                h.state = LifecycleState.KILLED
                h.term_signal = -final
            else:
                h.state = LifecycleState.EXITED
                h.exit_code = final
            return RawStopNotice(tid=h.pid, kind=NoticeKind.EXIT, exit_code=final)

        if not os.WIFSTOPPED(status):
            return None

        if tid not in h._threads:
            # Stop from a clone child whose creation notice we have not
            # processed yet; hold it until the CLONE event names the tid.
            h._orphan_stops[tid] = status
            return None

        ts = h._threads[tid]
        ts.running = False
        sig = os.WSTOPSIG(status)
        event = status >> 16

        if event == ptrace.EVENT_CLONE:
            new_tid = ptrace.get_event_msg(tid)
            h._add_tid(new_tid, running=True)
            h._threads[new_tid].awaiting_birth_stop = True
            if new_tid in h._orphan_stops:
                self._consume_birth_stop(h, new_tid, h._orphan_stops.pop(new_tid))
            return RawStopNotice(tid=tid, kind=NoticeKind.CLONE, new_tid=new_tid)

        if event == ptrace.EVENT_EXEC:
            return RawStopNotice(tid=tid, kind=NoticeKind.EXEC)

        if sig == ptrace.SYSCALL_TRAP_SIG:
            return RawStopNotice(tid=tid, kind=NoticeKind.SYSCALL_TRAP)

        if sig == signal.SIGSTOP:
            if ts.awaiting_birth_stop:
                ts.awaiting_birth_stop = False
                return None  # newborn thread halted; stays stopped until resume
            if ts.owed_sigstops > 0:
                ts.owed_sigstops -= 1
                # Our own stop-the-world signal. During a full-speed run the
                # thread goes straight back into motion; if it preempted a
                # requested step (delivered-stop before any instruction
                # retired), the step is re-issued so it still happens.
                if h._world_running:
                    self._re_run(h, tid)
                elif tid in h._step_tids:
                    try:
                        ptrace.singlestep(tid)
                        ts.running = True
                    except OSError:
                        pass
                return None

        if sig == signal.SIGTRAP and tid in h._step_tids:
            h._step_tids.discard(tid)
            return RawStopNotice(tid=tid, kind=NoticeKind.STEP)

        return RawStopNotice(tid=tid, kind=NoticeKind.SIGNAL, signo=sig)

    def _consume_birth_stop(self, h: TraceeHandle, tid: int, status: int) -> None:
        ts = h._threads[tid]
        ts.running = False
        if os.WIFSTOPPED(status) and os.WSTOPSIG(status) == signal.SIGSTOP:
            ts.awaiting_birth_stop = False

    def _re_run(self, h: TraceeHandle, tid: int) -> None:
        try:
            if h._last_mode is ResumeMode.SYSCALL_STOP:
                ptrace.syscall_resume(tid)
            else:
                ptrace.cont(tid)
            h._threads[tid].running = True
        except OSError:
            pass

    def _stop_world(self, h: TraceeHandle, exclude: int) -> None:
        """Halt all still-running threads, queueing any genuine events."""
        for tid, ts in list(h._threads.items()):
            if tid == exclude or not ts.running:
                continue
            if not ts.awaiting_birth_stop:
                try:
                    ptrace.tgkill(h.pid, tid, signal.SIGSTOP)
                    ts.owed_sigstops += 1
                except OSError:
                    pass
            while ts.running:
                try:
                    res = ptrace.waitpid_all(tid)
                except ChildProcessError:
                    h._drop_tid(tid)
                    break
                wtid, status = res
                if os.WIFEXITED(status) or os.WIFSIGNALED(status):
                    code = -os.WTERMSIG(status) if os.WIFSIGNALED(status) else os.WEXITSTATUS(status)
                    if wtid == h.pid:
                        h._pid_status = code
                    h._drop_tid(wtid)
                    break
                ts.running = False
                sig = os.WSTOPSIG(status)
                event = status >> 16
                if event == 0 and sig == signal.SIGSTOP and ts.owed_sigstops > 0:
                    ts.owed_sigstops -= 1  # our stop signal; swallowed
                elif event == 0 and sig == signal.SIGSTOP and ts.awaiting_birth_stop:
                    ts.awaiting_birth_stop = False
                else:
                    # A real event raced with the stop request; keep it for a
                    # later wait_notice. The stop signal stays pending.
                    queued = self._decode_stopped(h, tid, status)
                    if queued is not None:
                        h._queued.append(queued)

    def _decode_stopped(self, h: TraceeHandle, tid: int, status: int) -> RawStopNotice | None:
        notice = self._decode(h, tid, status)
        if notice is not None and h._threads.get(tid) is not None:
            h._threads[tid].running = False
        return notice

    # -- misc ----------------------------------------------------------------

    def _require(self, h: TraceeHandle, *states: LifecycleState) -> None:
        if h._closed:
            raise InvalidState("handle is detached")
        if h.state not in states:
            raise InvalidState(f"operation requires {'/'.join(s.value for s in states)}, state is {h.state.value}")

    def _require_tid(self, h: TraceeHandle, tid: int) -> None:
        if tid not in h._threads:
            raise NoSuchThread(f"tid {tid} is not part of pid {h.pid}")
