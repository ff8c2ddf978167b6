"""Script-friendly bindings over the scriptdbg engine.

`ScriptDebugger` wraps one engine debuggee with a compact surface meant for
short automation scripts: breakpoints and watchpoints take plain functions,
syscall handlers can rewrite the call in flight, registers read like
attributes, and stdio is two calls. Callbacks run synchronously on the
engine's dispatch path, so inside them the target is stopped and fully
mutable. Engine exceptions pass through unchanged; ``error_code`` maps any
of them to its stable name.

The bindings are version-locked to the engine: importing this module under
a mismatched core raises :class:`BindingsVersionError`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Union

import scriptdbg as _core
from scriptdbg import (
    ALL,
    Debuggee,
    FaultRule,
    RegisterFile,
    RunControl,
    SignalPolicy,
    StdioMode,
    TrapKind,
    WatchTrigger,
)
from scriptdbg.errors import ScriptDbgError

REQUIRED_CORE_VERSION = "0.1.0"
__version__ = "0.1.0"


class BindingsVersionError(ImportError):
    """The installed engine core does not match these bindings."""


def _check_core_version(core_version: str) -> None:
    if core_version != REQUIRED_CORE_VERSION:
        raise BindingsVersionError(
            f"bindings {__version__} require engine core {REQUIRED_CORE_VERSION}, "
            f"found {core_version}"
        )


_check_core_version(_core.__version__)


def error_code(exc: BaseException) -> str:
    """Stable engine error code for an exception (its engine class name)."""
    if isinstance(exc, (ScriptDbgError, PermissionError)):
        return type(exc).__name__
    return "UnknownError"


def bind_api():
    """Return the bound scripting surface, re-verifying the core version."""
    _check_core_version(_core.__version__)
    import sys

    return sys.modules[__name__]


class SyscallCall:
    """One syscall boundary as seen by a script handler."""

    def __init__(self, sd: "ScriptDebugger", ctx):
        self._sd = sd
        self._ctx = ctx

    @property
    def name(self) -> str:
        return self._ctx.record.name

    @property
    def nr(self) -> int:
        return self._ctx.record.nr

    @property
    def args(self) -> tuple[int, ...]:
        return self._ctx.record.args

    @property
    def ret(self) -> Optional[int]:
        return self._ctx.record.ret

    @property
    def tid(self) -> int:
        return self._ctx.record.tid

    @property
    def injected(self) -> bool:
        return self._ctx.record.injected

    def hijack(self, nr: Union[int, str, None] = None,
               args: dict[int, int] | None = None) -> None:
        """Rewrite the pending call; only valid inside an enter handler."""
        self._sd._dbg.hijack_syscall(self._ctx, new_nr=nr, new_args=args)


class ScriptDebugger:
    """One debugged process with a scripting-oriented control surface.

    ``owns_target`` decides what dropping the wrapper does: an owned target
    (the default for spawned ones) is killed, a borrowed one (attached) is
    detached and released.
    """

    def __init__(self, dbg: Debuggee, owns_target: bool):
        self._dbg = dbg
        self.owns_target = owns_target
        self.current_tid: int | None = None

    # -- construction --------------------------------------------------------

    @classmethod
    def spawn(cls, path: str, argv: Iterable[str] = (), env: dict[str, str] | None = None,
              pipe_stdio: bool = True, disable_aslr: bool | None = None,
              owns_target: bool = True) -> "ScriptDebugger":
        dbg = Debuggee.spawn(path, argv, env,
                             StdioMode.PIPE if pipe_stdio else StdioMode.INHERIT,
                             disable_aslr)
        return cls(dbg, owns_target)

    @classmethod
    def attach(cls, pid: int, owns_target: bool = False) -> "ScriptDebugger":
        return cls(Debuggee.attach(pid), owns_target)

    def __enter__(self) -> "ScriptDebugger":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self._dbg.state.value in ("exited", "killed"):
            self._dbg.close()
            return
        if self.owns_target:
            self._dbg.close()
        else:
            try:
                self._dbg.detach()
            except ScriptDbgError:
                self._dbg.close()

    # -- identity --------------------------------------------------------------

    @property
    def pid(self) -> int:
        return self._dbg.pid

    @property
    def tids(self) -> list[int]:
        return self._dbg.tids

    @property
    def state(self) -> str:
        return self._dbg.state.value

    @property
    def exit_code(self) -> int | None:
        return self._dbg.exit_code

    @property
    def engine(self) -> Debuggee:
        """The underlying engine handle, for anything not wrapped here."""
        return self._dbg

    # -- traps -------------------------------------------------------------------

    def breakpoint(self, location: Union[int, str], callback: Callable | None = None,
                   one_shot: bool = False, hardware: bool = False):
        """Plant a breakpoint; ``callback(sd, bp)`` fires on every hit."""
        wrapped = self._wrap_trap_callback(callback)
        return self._dbg.set_breakpoint(
            location,
            kind=TrapKind.HARDWARE if hardware else TrapKind.SOFTWARE,
            one_shot=one_shot, callback=wrapped,
        )

    def watchpoint(self, address: int, length: int = 8, trigger: str = "write",
                   callback: Callable | None = None):
        """Watch a data range; ``callback(sd, wp)`` fires when it is touched."""
        wrapped = self._wrap_trap_callback(callback)
        trig = WatchTrigger.WRITE if trigger == "write" else WatchTrigger.READ_WRITE
        return self._dbg.set_watchpoint(address, length, trig, callback=wrapped)

    def clear(self, trap_id: int) -> None:
        self._dbg.clear_trap(trap_id)

    def enable(self, trap_id: int, enabled: bool = True) -> None:
        self._dbg.set_trap_enabled(trap_id, enabled)

    def _wrap_trap_callback(self, callback: Callable | None):
        if callback is None:
            return None

        def adapter(dbg, event, trap):
            self.current_tid = event.tid
            return callback(self, trap)

        return adapter

    # -- syscalls -------------------------------------------------------------------

    def on_syscall(self, selector=ALL, enter: Callable | None = None,
                   exit: Callable | None = None) -> int:
        """Handle matching syscalls; handlers get ``(sd, call)``."""

        def wrap(fn):
            if fn is None:
                return None

            def adapter(dbg, ctx):
                self.current_tid = ctx.record.tid
                return fn(self, SyscallCall(self, ctx))

            return adapter

        return self._dbg.trace_syscalls(selector, on_enter=wrap(enter), on_exit=wrap(exit))

    def fail_syscall(self, syscall: Union[str, int], errno_value: int,
                     nth: Union[int, object] = 1,
                     when: Callable[[tuple[int, ...]], bool] | None = None) -> int:
        """Make the nth matching call return ``-errno_value`` without running."""
        return self._dbg.inject_fault(FaultRule(syscall=syscall, errno_value=errno_value,
                                                nth=nth, arg_predicate=when))

    # -- signals --------------------------------------------------------------------

    def on_signal(self, signo: int, callback: Callable, deliver: bool = True) -> None:
        """Observe a signal; ``callback(sd, thread_ctx)``, then deliver or swallow."""

        def adapter(dbg, thread_ctx):
            self.current_tid = thread_ctx.tid
            return callback(self, thread_ctx)

        policy = self._policy()
        policy.on_signal(signo, adapter,
                         then=SignalPolicy.PASS if deliver else SignalPolicy.SUPPRESS)
        self._dbg.set_signal_policy(policy)

    def suppress_signal(self, signo: int) -> None:
        self._dbg.set_signal_policy(self._policy().set(signo, SignalPolicy.SUPPRESS))

    def pass_signal(self, signo: int) -> None:
        self._dbg.set_signal_policy(self._policy().set(signo, SignalPolicy.PASS))

    def _policy(self) -> SignalPolicy:
        return self._dbg.signal_policy

    # -- registers & memory ------------------------------------------------------------

    def regs(self, tid: int | None = None) -> RegisterFile:
        return self._dbg.registers(tid)

    def set_regs(self, regs: RegisterFile, tid: int | None = None) -> None:
        self._dbg.write_registers(regs, tid)

    def get_reg(self, name: str, tid: int | None = None) -> int:
        return self._dbg.registers(tid)[name]

    def set_reg(self, name: str, value: int, tid: int | None = None) -> None:
        regs = self._dbg.registers(tid)
        regs[name] = value
        self._dbg.write_registers(regs, tid)

    def read(self, addr: int, length: int) -> bytes:
        return self._dbg.read_memory(addr, length)

    def read_raw(self, addr: int, length: int) -> bytes:
        return self._dbg.read_memory_raw(addr, length)

    def write(self, addr: int, data: bytes) -> None:
        self._dbg.write_memory(addr, data)

    def symbol(self, name: str, obj: str | None = None) -> int:
        return self._dbg.resolve_symbol(name, obj)

    def where(self, addr: int):
        return self._dbg.resolve_address(addr)

    def stack(self, tid: int | None = None, max_depth: int = 64):
        return self._dbg.backtrace(tid, max_depth)

    # -- stdio -------------------------------------------------------------------------

    def send(self, data: bytes) -> int:
        return self._dbg.stdin_write(data)

    def sendline(self, data: bytes) -> int:
        return self._dbg.stdin_write(data + b"\n")

    def close_stdin(self) -> None:
        self._dbg.stdin_close()

    def recv(self, max_bytes: int = 65536, timeout: float | None = None) -> bytes:
        return self._dbg.stdout_read(max_bytes, timeout)

    def recv_err(self, max_bytes: int = 65536, timeout: float | None = None) -> bytes:
        return self._dbg.stderr_read(max_bytes, timeout)

    # -- execution -----------------------------------------------------------------------

    def run(self) -> int | None:
        """Drive to exit (or a handler's stop request); returns the exit code."""
        return self._dbg.run_until_exit()

    def cont(self, deliver_signal: int | None = None) -> None:
        self._dbg.resume(deliver_signal=deliver_signal)

    def step(self, tid: int | None = None):
        return self._dbg.single_step(tid)

    def wait(self):
        """Block until the next engine event and return it."""
        event = self._dbg.wait_event()
        self.current_tid = event.tid
        return event

    def kill(self) -> None:
        self._dbg.kill()

    def detach(self) -> None:
        self._dbg.detach()


STOP = RunControl.STOP

__all__ = [
    "ALL",
    "STOP",
    "BindingsVersionError",
    "ScriptDebugger",
    "SyscallCall",
    "bind_api",
    "error_code",
    "__version__",
    "REQUIRED_CORE_VERSION",
]
