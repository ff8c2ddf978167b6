"""Syscall trace tool: one log line per completed syscall."""

from __future__ import annotations

from dataclasses import dataclass
from typing import IO, Iterable

from ..arch import syscall_number
from ..events import ALL, Debuggee, SyscallContext
from ..backend import StdioMode


def _hex(value: int) -> str:
    return f"-{-value:#x}" if value < 0 else f"{value:#x}"


@dataclass
class _OpenCall:
    name: str
    args: tuple[int, ...]


def format_line(tid: int, name: str, args: Iterable[int], ret: int | None) -> str:
    rendered = ", ".join(_hex(a) for a in args)
    ret_s = "?" if ret is None else _hex(ret)
    return f"{tid} {name}({rendered}) = {ret_s}"


def run_trace(binary: str, argv: list[str], filter_names: list[str] | None,
              output: IO[str], keep_aslr: bool = False,
              stdio: StdioMode = StdioMode.INHERIT) -> int:
    """Trace the binary's syscalls into ``output``; returns the tracee's exit code.

    The filter is validated before anything is spawned so a typo cannot
    launch the target. Calls that never return (the final process exit)
    are logged with ``= ?``.
    """
    from ..arch import detect_arch

    selector = ALL
    if filter_names:
        arch = detect_arch(binary)
        selector = [syscall_number(arch, n) for n in filter_names]

    open_calls: dict[int, _OpenCall] = {}
    lines: list[str] = []

    def on_enter(dbg: Debuggee, ctx: SyscallContext) -> None:
        open_calls[ctx.tid] = _OpenCall(ctx.record.name, ctx.record.args)

    def on_exit(dbg: Debuggee, ctx: SyscallContext) -> None:
        call = open_calls.pop(ctx.tid, None)
        name = call.name if call else ctx.record.name
        args = call.args if call else ctx.record.args
        lines.append(format_line(ctx.tid, name, args, ctx.record.ret))

    with Debuggee.spawn(binary, argv, stdio=stdio, disable_aslr=not keep_aslr) as dbg:
        dbg.trace_syscalls(selector, on_enter=on_enter, on_exit=on_exit)
        status = dbg.run_until_exit()

    for tid, call in sorted(open_calls.items()):
        lines.append(format_line(tid, call.name, call.args, None))
    output.write("\n".join(lines) + ("\n" if lines else ""))
    return status if status is not None else 0
