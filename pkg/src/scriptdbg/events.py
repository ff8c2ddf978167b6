"""The engine loop and the user-facing debuggee handle.

`Debuggee` owns one traced process end to end: lifecycle, registers and
memory, traps, syscall tracing and rewriting, signal policy, stdio, and the
event pump that higher-level tools program against. All control operations
must come from one thread (the native debug API binds the tracer role to
the requesting thread); stdio helpers may be used from anywhere.
"""

from __future__ import annotations

import collections
import enum
import os
import select
import signal as _signal
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Union

from . import symbols as _symbols
from .arch import syscall_name, syscall_number
from .backend import (
    DebugBackend,
    LifecycleState,
    NoticeKind,
    PtraceBackend,
    RawStopNotice,
    ResumeMode,
    StdioMode,
    TraceeHandle,
)
from .breakpoints import Breakpoint, TrapKind, TrapTable, Watchpoint, WatchTrigger, _EmulatedHit
from .errors import (
    EndOfStream,
    InvalidContext,
    InvalidState,
    NoSuchThread,
    PolicyError,
    RuleConflict,
)
from .model import (
    DebugEvent,
    MemoryMap,
    RegisterFile,
    StopKind,
    StopReason,
    ThreadContext,
    load_maps,
)


class _AllSelector:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "ALL"


ALL = _AllSelector()

_SKIP_SYSCALL_NR = -1  # kernels skip the call and return ENOSYS


class RunControl(enum.Enum):
    """Directive a callback may return to the event loop."""

    CONTINUE = "continue"
    STOP = "stop"


class SyscallDirection(enum.Enum):
    ENTER = "enter"
    EXIT = "exit"


@dataclass
class SyscallRecord:
    """One traced syscall boundary.

    Enter/exit pairs alternate per thread and carry the same nr unless the
    enter was hijacked, in which case the exit reports the substituted nr.
    Fault-injected records keep the original nr and set ``injected``.
    """

    tid: int
    nr: int
    name: str
    args: tuple[int, ...]
    direction: SyscallDirection
    seq: int
    ret: int | None = None
    injected: bool = False


@dataclass
class FaultRule:
    """Deterministic error injection for matching syscall entries.

    The nth matching entry (1-based, or every one with ``nth=ALL``) is
    rewritten so the kernel never executes it, and its exit value is
    replaced with ``-errno_value``.
    """

    syscall: Union[str, int]
    errno_value: int
    nth: Union[int, _AllSelector] = 1
    arg_predicate: Optional[Callable[[tuple[int, ...]], bool]] = None
    consumed: bool = False


class SignalAction(enum.Enum):
    PASS = "pass"
    SUPPRESS = "suppress"
    CALLBACK = "callback"


@dataclass(frozen=True)
class _SignalRule:
    action: SignalAction
    handler: Optional[Callable] = None
    then: SignalAction = SignalAction.PASS


_UNSTOPPABLE = (_signal.SIGKILL, _signal.SIGSTOP)


class SignalPolicy:
    """Per-signal dispositions; the two kernel-reserved stops are rejected."""

    PASS = SignalAction.PASS
    SUPPRESS = SignalAction.SUPPRESS

    def __init__(self):
        self._rules: dict[int, _SignalRule] = {}

    def set(self, signo: int, action: SignalAction) -> "SignalPolicy":
        if signo in _UNSTOPPABLE:
            raise PolicyError(f"signal {signo} cannot be overridden")
        if action is SignalAction.CALLBACK:
            raise PolicyError("use on_signal() to install a callback")
        self._rules[signo] = _SignalRule(action)
        return self

    def on_signal(self, signo: int, handler: Callable, then: SignalAction = SignalAction.PASS) -> "SignalPolicy":
        if signo in _UNSTOPPABLE:
            raise PolicyError(f"signal {signo} cannot be overridden")
        self._rules[signo] = _SignalRule(SignalAction.CALLBACK, handler, then)
        return self

    def rule_for(self, signo: int) -> _SignalRule:
        return self._rules.get(signo, _SignalRule(SignalAction.PASS))

    def signals(self) -> Iterable[int]:
        return self._rules.keys()


@dataclass
class _Subscription:
    id: int
    nrs: Union[set[int], _AllSelector]
    on_enter: Optional[Callable]
    on_exit: Optional[Callable]


class SyscallContext:
    """Handler-side view of one syscall boundary; permits rewriting at enter."""

    def __init__(self, debuggee: "Debuggee", record: SyscallRecord):
        self.debuggee = debuggee
        self.record = record
        self._live = True

    @property
    def tid(self) -> int:
        return self.record.tid


@dataclass
class _PerThread:
    ctx: ThreadContext
    enter_surfaced: bool = False
    enter_sub_ids: tuple[int, ...] = ()
    pending_fault: Optional[FaultRule] = None
    current_nr: int | None = None
    # Breakpoint address whose hit was already delivered for this thread;
    # the next resume steps across it instead of reporting it again.
    stepover_addr: int | None = None


class Debuggee:
    """A live traced process and every engine operation on it."""

    def __init__(self, backend: DebugBackend, handle: TraceeHandle):
        self._backend = backend
        self._h = handle
        self._traps = TrapTable(backend, handle)
        self._threads: dict[int, _PerThread] = {
            tid: _PerThread(ThreadContext(tid=tid)) for tid in handle.tids
        }
        self._event_seq = 0
        self._record_seq = 0
        self._pending_events: collections.deque[DebugEvent] = collections.deque()
        self._exit_event_sent = False
        self._subs: dict[int, _Subscription] = {}
        self._next_sub_id = 1
        self._rules: dict[int, FaultRule] = {}
        self._rule_hits: dict[int, int] = {}
        self._next_rule_id = 1
        self._policy = SignalPolicy()
        self._pending_signals: dict[int, int] = {}
        self._stop_requested = False
        self._live_enter_ctx: SyscallContext | None = None
        self._emul_rotation = 0
        self._emul_deliver: dict[int, int] = {}
        self._user_step_tid: int | None = None
        self._stdout_buf = bytearray()
        self._stderr_buf = bytearray()
        self._stdout_eof = False
        self._stderr_eof = False

    # -- construction --------------------------------------------------------

    @classmethod
    def spawn(cls, path: str, argv: Iterable[str] = (), env: dict[str, str] | None = None,
              stdio: StdioMode = StdioMode.PIPE, disable_aslr: bool | None = None,
              backend: DebugBackend | None = None) -> "Debuggee":
        """Launch ``path`` under trace, halted before its first instruction."""
        backend = backend or PtraceBackend()
        handle = backend.spawn(path, list(argv), env, stdio, disable_aslr)
        return cls(backend, handle)

    @classmethod
    def attach(cls, pid: int, backend: DebugBackend | None = None) -> "Debuggee":
        """Attach to a running process, halting all of its threads."""
        backend = backend or PtraceBackend()
        handle = backend.attach(pid)
        return cls(backend, handle)

    def __enter__(self) -> "Debuggee":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if not self._h._closed and self._h.state not in (LifecycleState.EXITED, LifecycleState.KILLED):
            try:
                self._backend.kill(self._h)
            except Exception:
                pass
        for fd in (self._h.stdin_fd, self._h.stdout_fd, self._h.stderr_fd):
            if fd is not None:
                try:
                    os.close(fd)
                except OSError:
                    pass
        self._h.stdin_fd = self._h.stdout_fd = self._h.stderr_fd = None

    # -- identity ------------------------------------------------------------

    @property
    def pid(self) -> int:
        return self._h.pid

    @property
    def arch(self):
        return self._h.arch

    @property
    def state(self) -> LifecycleState:
        return self._h.state

    @property
    def exit_code(self) -> int | None:
        return self._h.exit_code

    @property
    def term_signal(self) -> int | None:
        return self._h.term_signal

    @property
    def tids(self) -> list[int]:
        return list(self._h.tids)

    @property
    def handle(self) -> TraceeHandle:
        return self._h

    @property
    def traps(self) -> TrapTable:
        return self._traps

    # -- lifecycle -------------------------------------------------------------

    def detach(self) -> None:
        """Remove every trap and release the process to run untraced."""
        if self._h.state is not LifecycleState.STOPPED:
            raise InvalidState(f"detach requires a stopped tracee, state is {self._h.state.value}")
        self._traps.remove_all()
        self._backend.detach(self._h)

    def kill(self) -> None:
        self._backend.kill(self._h)

    def resume(self, mode: ResumeMode | None = None, deliver_signal: int | None = None,
               tid: int | None = None) -> None:
        """Set every thread running; optionally inject a signal into one."""
        if deliver_signal is not None:
            self._pending_signals[tid if tid is not None else self._h.tids[0]] = deliver_signal
        self._resume_internal(mode)

    def single_step(self, tid: int | None = None) -> DebugEvent:
        """Retire exactly one instruction on one thread and report its stop."""
        tid = tid if tid is not None else self._h.tids[0]
        if tid not in self._threads:
            raise NoSuchThread(f"tid {tid}")
        regs = self._backend.read_registers(self._h, tid)
        bp = self._traps.enabled_software_bp_at(regs.pc)
        self._user_step_tid = tid
        try:
            if bp is not None:
                self._threads[tid].stepover_addr = None
                notice = self._traps.step_displaced(tid, bp)
                if notice is None:
                    notice = RawStopNotice(tid=tid, kind=NoticeKind.STEP)
            else:
                self._backend.single_step(self._h, tid)
                notice = self._backend.wait_notice(self._h)
            events = self._classify(notice)
        finally:
            self._user_step_tid = None
        if events:
            self._pending_events.extend(events[1:])
            return events[0]
        return self._emit(tid, StopReason.step())

    def step_over(self, tid: int | None = None) -> None:
        """Execute the instruction displaced by the breakpoint under pc."""
        tid = tid if tid is not None else self._h.tids[0]
        if tid not in self._threads:
            raise NoSuchThread(f"tid {tid}")
        notice = self._traps.step_over(tid)
        self._threads[tid].stepover_addr = None
        if notice is not None:
            events = self._classify(notice)
            self._pending_events.extend(events)

    def run_until_exit(self) -> int | None:
        """Pump events, dispatching callbacks, until the target is gone.

        Returns the exit code (negative signal number if signal-killed), or
        None when a callback asked the loop to halt with the target stopped.
        Callback exceptions propagate with the target left stopped.
        """
        if self._exit_event_sent:
            raise InvalidState("target already exited")
        self._stop_requested = False
        while True:
            event = self.wait_event()
            if event.reason.kind is StopKind.EXITED:
                return event.reason.exit_code
            if self._stop_requested:
                self._stop_requested = False
                return None

    def wait_event(self) -> DebugEvent:
        """Deliver the next engine event, resuming the target as needed."""
        self._drain_stdio()
        while True:
            if self._pending_events:
                return self._pending_events.popleft()
            if self._exit_event_sent:
                raise InvalidState("target already exited")
            if self._h.state in (LifecycleState.EXITED, LifecycleState.KILLED):
                # Exit observed outside wait (e.g. during a manual step).
                return self._emit_exit()
            if self._h.state is LifecycleState.STOPPED and not self._h._queued:
                self._resume_internal(None)
                if self._pending_events:
                    continue
            if self._h._queued:
                notice = self._backend.wait_notice(self._h)
            elif self._traps.emulation_needed():
                notice = self._emulated_wait()
            else:
                notice = self._backend.wait_notice(self._h)
            self._drain_stdio()
            events = self._classify(notice)
            self._pending_events.extend(events)

    # -- registers & memory ------------------------------------------------------

    def registers(self, tid: int | None = None) -> RegisterFile:
        return self._backend.read_registers(self._h, tid if tid is not None else self._h.tids[0])

    def write_registers(self, regs: RegisterFile, tid: int | None = None) -> None:
        self._backend.write_registers(self._h, tid if tid is not None else self._h.tids[0], regs)

    def read_memory(self, addr: int, length: int) -> bytes:
        """Memory as the target believes it to be: trap patches masked out."""
        if self._h.state is not LifecycleState.STOPPED:
            raise InvalidState("memory access requires a stopped tracee")
        return self._traps.masked_read(addr, length)

    def read_memory_raw(self, addr: int, length: int) -> bytes:
        return self._backend.read_memory_raw(self._h, addr, length)

    def write_memory(self, addr: int, data: bytes) -> None:
        self._backend.write_memory_raw(self._h, addr, data)

    def maps(self) -> list[MemoryMap]:
        if self._h.state is not LifecycleState.STOPPED:
            raise InvalidState("map snapshot requires a stopped tracee")
        return load_maps(self._h.pid)

    def snapshot_thread(self, tid: int) -> ThreadContext:
        pt = self._threads.get(tid)
        if pt is None:
            raise NoSuchThread(f"tid {tid}")
        regs = self._backend.read_registers(self._h, tid)
        return ThreadContext(tid=tid, stop_reason=pt.ctx.stop_reason, regs=regs,
                             in_syscall=pt.ctx.in_syscall)

    # -- symbols ----------------------------------------------------------------

    def objects(self) -> list[_symbols.LoadedObject]:
        return _symbols.enumerate_objects(self.maps())

    def resolve_symbol(self, name: str, object_filter: str | None = None) -> int:
        return _symbols.resolve_symbol(self.objects(), name, object_filter)

    def resolve_address(self, addr: int) -> tuple[str, str | None, int] | None:
        return _symbols.resolve_address(self.objects(), addr)

    def backtrace(self, tid: int | None = None, max_depth: int = 64) -> list[_symbols.StackFrame]:
        tid = tid if tid is not None else self._h.tids[0]
        regs = self._backend.read_registers(self._h, tid)
        return _symbols.backtrace(
            lambda a, n: self.read_memory(a, n), self.maps(), self.objects(),
            pc=regs.pc, fp=regs.fp, sp=regs.sp, max_depth=max_depth,
        )

    # -- traps --------------------------------------------------------------------

    def set_breakpoint(self, location: Union[int, str], kind: TrapKind = TrapKind.SOFTWARE,
                       one_shot: bool = False, callback: Callable | None = None) -> Breakpoint:
        if self._h.state is not LifecycleState.STOPPED:
            raise InvalidState("traps can only be placed while stopped")
        addr = location if isinstance(location, int) else self.resolve_symbol(location)
        return self._traps.set_breakpoint(addr, kind, one_shot, callback, maps=self.maps())

    def set_watchpoint(self, address: int, length: int = 8,
                       trigger: WatchTrigger = WatchTrigger.WRITE,
                       callback: Callable | None = None) -> Watchpoint:
        if self._h.state is not LifecycleState.STOPPED:
            raise InvalidState("traps can only be placed while stopped")
        return self._traps.set_watchpoint(address, length, trigger, callback)

    def clear_trap(self, trap_id: int) -> None:
        self._traps.clear(trap_id)

    def set_trap_enabled(self, trap_id: int, enabled: bool) -> None:
        self._traps.set_enabled(trap_id, enabled)

    # -- syscalls -------------------------------------------------------------------

    def trace_syscalls(self, selector=ALL, on_enter: Callable | None = None,
                       on_exit: Callable | None = None) -> int:
        """Surface matching syscall boundaries as events and invoke handlers."""
        nrs = self._selector_to_nrs(selector)
        sub = _Subscription(self._next_sub_id, nrs, on_enter, on_exit)
        self._subs[sub.id] = sub
        self._next_sub_id += 1
        return sub.id

    def untrace_syscalls(self, sub_id: int) -> None:
        self._subs.pop(sub_id, None)

    def hijack_syscall(self, ctx: SyscallContext, new_nr: Union[int, str, None] = None,
                       new_args: dict[int, int] | None = None) -> None:
        """Rewrite the syscall about to execute; only valid from an enter handler."""
        if ctx is not self._live_enter_ctx or not ctx._live:
            raise InvalidContext("hijack is only valid inside an on-enter handler")
        tid = ctx.record.tid
        if new_nr is not None:
            nr = syscall_number(self._h.arch, new_nr) if isinstance(new_nr, str) else new_nr
            self._backend.set_syscall_number(self._h, tid, nr)
            self._threads[tid].current_nr = nr
        if new_args:
            regs = self._backend.read_registers(self._h, tid)
            for index, value in new_args.items():
                regs[self._h.arch.syscall_args[index]] = value
            self._backend.write_registers(self._h, tid, regs)

    def inject_fault(self, rule: FaultRule) -> int:
        """Register deterministic error injection; returns the rule id."""
        if rule.errno_value <= 0:
            raise RuleConflict("errno_value must be a positive error number")
        if not isinstance(rule.nth, _AllSelector) and rule.nth < 1:
            raise RuleConflict("nth is 1-based")
        nr = self._rule_nr(rule)
        for other in self._rules.values():
            if other.consumed or self._rule_nr(other) != nr:
                continue
            if other.arg_predicate is None and rule.arg_predicate is None:
                if isinstance(rule.nth, _AllSelector) or isinstance(other.nth, _AllSelector) or rule.nth == other.nth:
                    raise RuleConflict(f"rule already covers syscall {rule.syscall} occurrence {rule.nth}")
        rule_id = self._next_rule_id
        self._next_rule_id += 1
        self._rules[rule_id] = rule
        self._rule_hits[rule_id] = 0
        return rule_id

    def _rule_nr(self, rule: FaultRule) -> int:
        if isinstance(rule.syscall, str):
            return syscall_number(self._h.arch, rule.syscall)
        return rule.syscall

    def _selector_to_nrs(self, selector):
        if selector is ALL:
            return ALL
        if isinstance(selector, (str, int)):
            selector = [selector]
        nrs = set()
        for item in selector:
            nrs.add(syscall_number(self._h.arch, item) if isinstance(item, str) else item)
        return nrs

    # -- signals ------------------------------------------------------------------

    def set_signal_policy(self, policy: SignalPolicy) -> None:
        for signo in policy.signals():
            if signo in _UNSTOPPABLE:
                raise PolicyError(f"signal {signo} cannot be overridden")
        self._policy = policy

    @property
    def signal_policy(self) -> SignalPolicy:
        return self._policy

    # -- stdio ----------------------------------------------------------------------

    def stdin_write(self, data: bytes) -> int:
        if self._h.stdin_fd is None:
            raise InvalidState("target was not spawned with piped stdio")
        try:
            return os.write(self._h.stdin_fd, data)
        except BrokenPipeError:
            raise EndOfStream("target stdin is closed") from None

    def stdin_close(self) -> None:
        if self._h.stdin_fd is not None:
            os.close(self._h.stdin_fd)
            self._h.stdin_fd = None

    def stdout_read(self, max_bytes: int = 65536, timeout: float | None = None) -> bytes:
        return self._pipe_read(True, max_bytes, timeout)

    def stderr_read(self, max_bytes: int = 65536, timeout: float | None = None) -> bytes:
        return self._pipe_read(False, max_bytes, timeout)

    def _pipe_read(self, is_stdout: bool, max_bytes: int, timeout: float | None) -> bytes:
        fd = self._h.stdout_fd if is_stdout else self._h.stderr_fd
        if fd is None:
            raise InvalidState("target was not spawned with piped stdio")
        buf = self._stdout_buf if is_stdout else self._stderr_buf
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            self._drain_stdio()
            if buf:
                out = bytes(buf[:max_bytes])
                del buf[:max_bytes]
                return out
            if self._stdout_eof if is_stdout else self._stderr_eof:
                raise EndOfStream("stream drained and closed")
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                return b""
            select.select([fd], [], [], min(remaining, 0.05) if remaining is not None else 0.05)

    def _drain_stdio(self) -> None:
        for fd, buf, eof_attr in (
            (self._h.stdout_fd, self._stdout_buf, "_stdout_eof"),
            (self._h.stderr_fd, self._stderr_buf, "_stderr_eof"),
        ):
            if fd is None or getattr(self, eof_attr):
                continue
            while True:
                try:
                    chunk = os.read(fd, 65536)
                except BlockingIOError:
                    break
                except OSError:
                    setattr(self, eof_attr, True)
                    break
                if chunk == b"":
                    setattr(self, eof_attr, True)
                    break
                buf.extend(chunk)

    # -- engine internals --------------------------------------------------------------

    def _emit(self, tid: int, reason: StopReason) -> DebugEvent:
        self._event_seq += 1
        event = DebugEvent(tid=tid, reason=reason, seq=self._event_seq,
                           timestamp=time.monotonic_ns())
        pt = self._threads.get(tid)
        if pt is not None:
            pt.ctx.stop_reason = reason
        return event

    def _emit_exit(self) -> DebugEvent:
        code = self._h.exit_code if self._h.exit_code is not None else -(self._h.term_signal or 0)
        self._exit_event_sent = True
        return self._emit(self._h.pid, StopReason.exited(code))

    def _dispatch(self, callback: Callable | None, *args) -> None:
        if callback is None:
            return
        result = callback(self, *args)
        if result is RunControl.STOP:
            self._stop_requested = True

    def _syscall_mode_needed(self) -> bool:
        if self._subs:
            return True
        if any(not r.consumed for r in self._rules.values()):
            return True
        return any(pt.pending_fault is not None or pt.ctx.in_syscall for pt in self._threads.values())

    def _resume_internal(self, mode: ResumeMode | None) -> None:
        if self._h.state is not LifecycleState.STOPPED:
            raise InvalidState(f"resume requires a stopped tracee, state is {self._h.state.value}")
        if mode is None:
            mode = ResumeMode.SYSCALL_STOP if self._syscall_mode_needed() else ResumeMode.CONTINUE
        if self._traps.emulation_needed():
            # The single-step pump drives execution; record intent and return.
            self._h._last_mode = mode
            self._emul_deliver.update(self._pending_signals)
            self._pending_signals.clear()
            return
        # Threads parked on a breakpoint: step across delivered hits; a
        # thread that merely came to rest on a trap address (stopped by the
        # all-stop interrupt just before executing it) is owed its report.
        for tid in list(self._h.tids):
            if self._h._queued or self._pending_events:
                break
            pt = self._threads.get(tid)
            if pt is None:
                continue
            try:
                regs = self._backend.read_registers(self._h, tid)
            except (OSError, NoSuchThread, InvalidState):
                continue
            bp = self._traps.enabled_software_bp_at(regs.pc)
            if bp is None:
                continue
            if pt.stepover_addr == regs.pc:
                pt.stepover_addr = None
                notice = self._traps.step_displaced(tid, bp)
                if notice is not None:
                    self._h._queued.append(notice)
            else:
                self._pending_events.extend(
                    self._classify(_EmulatedHit(tid=tid, trap_id=bp.id, is_watch=False)))
        if (self._h.state is LifecycleState.STOPPED and not self._h._queued
                and not self._pending_events):
            deliver = dict(self._pending_signals)
            self._pending_signals.clear()
            self._backend.resume(self._h, mode, deliver)

    def _emulated_wait(self) -> RawStopNotice | _EmulatedHit:
        """Single-step pump used while inert debug hardware forces emulation.

        Threads are stepped round-robin with a short report timeout so one
        thread parked in a blocking syscall cannot stall the rest; its step
        completes (and is collected) whenever the kernel lets it through.
        Before a genuine event is handed up, the remaining threads are
        halted to preserve the all-stop contract.
        """
        while True:
            tids = [t for t in self._h.tids if t in self._threads]
            if not tids:
                return self._backend.wait_notice(self._h)
            self._emul_rotation %= len(tids)
            rotation = tids[self._emul_rotation:] + tids[: self._emul_rotation]
            self._emul_rotation = (self._emul_rotation + 1) % len(tids)
            progressed = False
            for tid in rotation:
                ts = self._h._threads.get(tid)
                pt = self._threads.get(tid)
                if ts is None or pt is None:
                    continue
                if ts.running:
                    # A previous step has not reported yet (blocking syscall).
                    notice = self._backend.poll_notice(self._h, tid, 0.0)
                else:
                    sig = self._emul_deliver.pop(tid, 0)
                    regs = self._backend.read_registers(self._h, tid)
                    bp = self._traps.enabled_software_bp_at(regs.pc)
                    if bp is not None:
                        if pt.stepover_addr != regs.pc:
                            # The thread came to rest on the trap address
                            # without executing it; that is a hit to report.
                            self._backend.stop_world(self._h, exclude=tid)
                            return _EmulatedHit(tid=tid, trap_id=bp.id, is_watch=False)
                        pt.stepover_addr = None
                        notice = self._traps.step_displaced(tid, bp)
                        if notice is None:
                            notice = RawStopNotice(tid=tid, kind=NoticeKind.STEP)
                    else:
                        self._backend.single_step(self._h, tid, deliver_signal=sig)
                        notice = self._backend.poll_notice(self._h, tid, 0.002)
                if notice is None:
                    continue
                progressed = True
                if notice.kind is NoticeKind.EXIT:
                    return notice
                if notice.kind is NoticeKind.STEP and notice.tid == tid:
                    hit = self._traps.check_emulated_watch_hit(tid)
                    if hit is not None:
                        self._backend.stop_world(self._h, exclude=tid)
                        return hit
                    regs = self._backend.read_registers(self._h, tid)
                    exec_bp = self._traps.emulated_exec_bp_at(regs.pc)
                    if exec_bp is not None:
                        self._backend.stop_world(self._h, exclude=tid)
                        return _EmulatedHit(tid=tid, trap_id=exec_bp.id, is_watch=False)
                    continue
                self._backend.stop_world(self._h, exclude=notice.tid)
                return notice
            if not progressed:
                time.sleep(0.0002)

    # -- classification -------------------------------------------------------------------

    def _classify(self, notice: RawStopNotice | _EmulatedHit) -> list[DebugEvent]:
        if isinstance(notice, _EmulatedHit):
            return self._on_trap_hit(notice.tid, self._traps.get(notice.trap_id))

        kind = notice.kind
        if kind is NoticeKind.EXIT:
            self._threads.clear()
            return [self._emit_exit()]

        if kind is NoticeKind.CLONE:
            new_tid = notice.new_tid
            self._threads[new_tid] = _PerThread(ThreadContext(tid=new_tid))
            self._threads[new_tid].ctx.stop_reason = StopReason.thread_created(new_tid)
            self._traps.on_thread_created(new_tid)
            return [self._emit(notice.tid, StopReason.thread_created(new_tid))]

        if kind is NoticeKind.EXEC:
            return []  # image replaced; nothing to surface at this level

        if kind is NoticeKind.SYSCALL_TRAP:
            return self._on_syscall_boundary(notice.tid)

        if kind is NoticeKind.STEP:
            regs = self._backend.read_registers(self._h, notice.tid)
            bp = self._traps.enabled_software_bp_at(regs.pc - self._h.arch.trap_pc_offset)
            if bp is not None:
                # The step executed the patched trap, not the displaced
                # instruction; report the breakpoint instead.
                return self._on_sw_breakpoint(notice.tid, regs, bp)
            if self._traps.emulation_needed() and notice.tid != self._user_step_tid:
                # A pump-internal step that raced into the queue; check the
                # watched ranges it may have touched and surface nothing else.
                hit = self._traps.check_emulated_watch_hit(notice.tid)
                if hit is not None:
                    return self._classify(hit)
                exec_bp = self._traps.emulated_exec_bp_at(regs.pc)
                if exec_bp is not None:
                    return self._on_trap_hit(notice.tid, exec_bp)
                return []
            return [self._emit(notice.tid, StopReason.step())]

        if kind is NoticeKind.SIGNAL:
            return self._on_signal(notice.tid, notice.signo)

        raise AssertionError(f"unhandled notice {notice}")

    def _on_signal(self, tid: int, signo: int) -> list[DebugEvent]:
        if signo == _signal.SIGTRAP:
            regs = self._backend.read_registers(self._h, tid)
            bp = self._traps.enabled_software_bp_at(regs.pc - self._h.arch.trap_pc_offset)
            if bp is not None:
                return self._on_sw_breakpoint(tid, regs, bp)
            hw_trap = self._traps.decode_hw_stop(tid)
            if hw_trap is not None:
                return self._on_trap_hit(tid, hw_trap)

        reason = StopReason.signal(signo)
        pt = self._threads.get(tid)
        if pt is not None:
            pt.ctx.stop_reason = reason
        rule = self._policy.rule_for(signo)
        if rule.action is SignalAction.CALLBACK:
            self._dispatch(rule.handler, self.snapshot_thread(tid))
            disposition = rule.then
        else:
            disposition = rule.action
        if disposition is SignalAction.PASS:
            self._pending_signals[tid] = signo
        return [self._emit(tid, reason)]

    def _on_sw_breakpoint(self, tid: int, regs: RegisterFile, bp: Breakpoint) -> list[DebugEvent]:
        if self._h.arch.trap_pc_offset:
            regs.pc -= self._h.arch.trap_pc_offset
            self._backend.write_registers(self._h, tid, regs)
        return self._on_trap_hit(tid, bp)

    def _on_trap_hit(self, tid: int, trap) -> list[DebugEvent]:
        trap.hit_count += 1
        if isinstance(trap, Breakpoint):
            reason = StopReason.breakpoint(trap.id)
            pt = self._threads.get(tid)
            if pt is not None and trap.kind is TrapKind.SOFTWARE:
                pt.stepover_addr = trap.address
        else:
            reason = StopReason.watchpoint(trap.id)
        event = self._emit(tid, reason)
        self._dispatch(trap.callback, event, trap)
        if isinstance(trap, Breakpoint) and trap.one_shot and trap.id in self._traps.breakpoints:
            self._traps.clear(trap.id)
        return [event]

    def _on_syscall_boundary(self, tid: int) -> list[DebugEvent]:
        pt = self._threads.get(tid)
        if pt is None:
            return []
        regs = self._backend.read_registers(self._h, tid)
        if not pt.ctx.in_syscall:
            return self._on_syscall_enter(pt, regs)
        return self._on_syscall_exit(pt, regs)

    def _on_syscall_enter(self, pt: _PerThread, regs: RegisterFile) -> list[DebugEvent]:
        tid = pt.ctx.tid
        pt.ctx.in_syscall = True
        nr = self._signed(regs.syscall_nr)
        pt.current_nr = nr
        args = regs.syscall_args
        self._record_seq += 1
        record = SyscallRecord(tid=tid, nr=nr, name=syscall_name(self._h.arch, nr),
                               args=args, direction=SyscallDirection.ENTER,
                               seq=self._record_seq)

        for rule_id, rule in self._rules.items():
            if rule.consumed or self._rule_nr(rule) != nr:
                continue
            if rule.arg_predicate is not None and not rule.arg_predicate(args):
                continue
            self._rule_hits[rule_id] += 1
            fires = isinstance(rule.nth, _AllSelector) or self._rule_hits[rule_id] == rule.nth
            if not fires:
                continue
            self._backend.set_syscall_number(self._h, tid, _SKIP_SYSCALL_NR)
            pt.pending_fault = rule
            record.injected = True
            if not isinstance(rule.nth, _AllSelector):
                rule.consumed = True
            break

        matched = self._matching_subs(nr)
        pt.enter_surfaced = bool(matched)
        pt.enter_sub_ids = tuple(s.id for s in matched)
        if not matched:
            return []
        ctx = SyscallContext(self, record)
        self._live_enter_ctx = ctx
        try:
            for sub in matched:
                if sub.on_enter:
                    self._dispatch(sub.on_enter, ctx)
        finally:
            ctx._live = False
            self._live_enter_ctx = None
        event = self._emit(tid, StopReason.syscall_enter(record.nr))
        return [event]

    def _on_syscall_exit(self, pt: _PerThread, regs: RegisterFile) -> list[DebugEvent]:
        tid = pt.ctx.tid
        pt.ctx.in_syscall = False
        ret = self._signed(regs.syscall_ret)
        injected = False
        if pt.pending_fault is not None:
            ret = -pt.pending_fault.errno_value
            regs[self._h.arch.syscall_ret] = ret & ((1 << 64) - 1)
            self._backend.write_registers(self._h, tid, regs)
            pt.pending_fault = None
            injected = True
        nr = pt.current_nr if pt.current_nr is not None else self._signed(regs.syscall_nr)
        surfaced = pt.enter_surfaced
        sub_ids = pt.enter_sub_ids
        pt.enter_surfaced = False
        pt.enter_sub_ids = ()
        if not surfaced:
            return []
        self._record_seq += 1
        record = SyscallRecord(tid=tid, nr=nr, name=syscall_name(self._h.arch, nr),
                               args=regs.syscall_args, direction=SyscallDirection.EXIT,
                               seq=self._record_seq, ret=ret, injected=injected)
        ctx = SyscallContext(self, record)
        # The exit pairs with whichever subscriptions matched its enter, even
        # if the number was rewritten in between.
        for sub_id in sub_ids:
            sub = self._subs.get(sub_id)
            if sub is not None and sub.on_exit:
                self._dispatch(sub.on_exit, ctx)
        event = self._emit(tid, StopReason.syscall_exit(nr, ret))
        return [event]

    def _matching_subs(self, nr: int) -> list[_Subscription]:
        return [s for s in self._subs.values()
                if isinstance(s.nrs, _AllSelector) or nr in s.nrs]

    @staticmethod
    def _signed(value: int) -> int:
        return value - (1 << 64) if value >= (1 << 63) else value
