"""Crash triage: post-mortem on a fatal signal plus overflow offset discovery.

A candidate input (from a fuzzer or by hand) is fed to the target's stdin.
If it dies, registers and a stack trace are captured at the fault, before
the process is reaped. For segmentation faults the target is run once more
with a cyclic pattern so the saved frame pointer and return slot reveal at
which input offsets they were overwritten.
"""

from __future__ import annotations

import signal as _signal
from dataclasses import dataclass, field

from ..backend import StdioMode
from ..errors import EndOfStream, NoCrash, NotInPattern
from ..events import Debuggee, RunControl, SignalPolicy
from ..model import RegisterFile, ThreadContext
from ..symbols import StackFrame
from .cyclic import DEFAULT_ORDER, cyclic, cyclic_find

_FATAL_SIGNALS = (
    _signal.SIGSEGV,
    _signal.SIGBUS,
    _signal.SIGILL,
    _signal.SIGFPE,
    _signal.SIGABRT,
)


@dataclass
class TriageFinding:
    """Everything the post-mortem learned about one crashing input."""

    faulting_signal: int
    registers: RegisterFile
    stack_trace: list[StackFrame] = field(default_factory=list)
    fp_clobbered: bool = False
    pc_clobbered: bool = False
    offset_to_fp: int | None = None
    offset_to_pc: int | None = None
    crash_symbol: str | None = None

    def summary(self) -> str:
        lines = [f"fatal signal: {_signal.Signals(self.faulting_signal).name}"]
        if self.crash_symbol:
            lines.append(f"faulting function: {self.crash_symbol}")
        lines.append(f"pc={self.registers.pc:#x} sp={self.registers.sp:#x} fp={self.registers.fp:#x}")
        if self.fp_clobbered:
            lines.append(f"saved frame pointer overwritten at input offset {self.offset_to_fp}")
        if self.pc_clobbered:
            lines.append(f"saved return address overwritten at input offset {self.offset_to_pc}")
        for i, frame in enumerate(self.stack_trace):
            sym = f"{frame.symbol[0]}+{frame.symbol[1]:#x}" if frame.symbol else "?"
            lines.append(f"  #{i} {frame.return_address:#x} {sym}")
        return "\n".join(lines)


@dataclass
class _CrashCapture:
    signo: int | None = None
    context: ThreadContext | None = None
    trace: list[StackFrame] = field(default_factory=list)


def _run_payload(binary: str, payload: bytes, keep_aslr: bool) -> _CrashCapture:
    capture = _CrashCapture()
    with Debuggee.spawn(binary, stdio=StdioMode.PIPE, disable_aslr=not keep_aslr) as dbg:
        policy = SignalPolicy()
        for signo in _FATAL_SIGNALS:
            def catch(dbg_, ctx, _signo=signo):
                capture.signo = _signo
                capture.context = ctx
                capture.trace = dbg_.backtrace(ctx.tid)
                return RunControl.STOP
            policy.on_signal(signo, catch, then=SignalPolicy.SUPPRESS)
        dbg.set_signal_policy(policy)
        try:
            dbg.stdin_write(payload)
            dbg.stdin_close()
        except EndOfStream:
            pass
        dbg.run_until_exit()
    return capture


def _window(value: int, order: int) -> bytes:
    return value.to_bytes(8, "little")[:order]


def _find_offset(data: bytes, order: int) -> int | None:
    try:
        return cyclic_find(data, order)
    except (NotInPattern, ValueError):
        return None


def run_triage(binary: str, payload: bytes, max_len: int = 4096,
               order: int = DEFAULT_ORDER, keep_aslr: bool = False) -> TriageFinding:
    """Post-mortem the payload's crash, then measure overwrite offsets.

    Raises NoCrash when the payload does not kill the target. Offsets are
    only reported for segmentation faults, and only when the corresponding
    saved slot actually carries pattern bytes.
    """
    first = _run_payload(binary, payload, keep_aslr)
    if first.signo is None:
        raise NoCrash("target exited normally on the candidate payload")

    context = first.context
    finding = TriageFinding(
        faulting_signal=first.signo,
        registers=context.regs,
        stack_trace=first.trace,
    )
    if first.trace and first.trace[0].symbol:
        finding.crash_symbol = first.trace[0].symbol[0]

    if first.signo != _signal.SIGSEGV:
        return finding

    # Second run: a pattern input turns clobbered slots into offsets.
    pattern_run = _PatternProbe(binary, max_len, order, keep_aslr).run()
    if pattern_run is not None:
        finding.offset_to_fp, finding.offset_to_pc = pattern_run
        finding.fp_clobbered = finding.offset_to_fp is not None
        finding.pc_clobbered = finding.offset_to_pc is not None
    return finding


class _PatternProbe:
    def __init__(self, binary: str, max_len: int, order: int, keep_aslr: bool):
        self.binary = binary
        self.max_len = max_len
        self.order = order
        self.keep_aslr = keep_aslr

    def run(self) -> tuple[int | None, int | None] | None:
        offsets: list[tuple[int | None, int | None]] = []

        def catch(dbg: Debuggee, ctx: ThreadContext):
            regs = ctx.regs
            fp_off = _find_offset(_window(regs.fp, self.order), self.order)
            # A hijacked return usually faults on the return instruction
            # itself, leaving the overwritten slot still at the stack top;
            # a pattern-valued pc covers indirect-branch corruption.
            pc_off = _find_offset(_window(regs.pc, self.order), self.order)
            if pc_off is None:
                try:
                    slot = dbg.read_memory(regs.sp, 8)
                    pc_off = _find_offset(slot[: self.order], self.order)
                except Exception:
                    pc_off = None
            offsets.append((fp_off, pc_off))
            return RunControl.STOP

        with Debuggee.spawn(self.binary, stdio=StdioMode.PIPE,
                            disable_aslr=not self.keep_aslr) as dbg:
            policy = SignalPolicy().on_signal(_signal.SIGSEGV, catch, then=SignalPolicy.SUPPRESS)
            dbg.set_signal_policy(policy)
            try:
                dbg.stdin_write(cyclic(self.max_len, self.order))
                dbg.stdin_close()
            except EndOfStream:
                pass
            dbg.run_until_exit()
        return offsets[0] if offsets else None
