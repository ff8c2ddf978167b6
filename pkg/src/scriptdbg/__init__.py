"""scriptdbg: a programmable debugger engine for Linux userland binaries.

The central entry point is :class:`Debuggee` (spawn or attach, then place
traps, trace syscalls, drive the event loop). The ``tools`` package holds
the command-line front ends built on it.
"""

from . import errors
from .arch import AARCH64, AMD64, ArchSpec, detect_arch, syscall_name, syscall_number
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
from .breakpoints import Breakpoint, TrapKind, Watchpoint, WatchTrigger
from .events import (
    ALL,
    Debuggee,
    FaultRule,
    RunControl,
    SignalAction,
    SignalPolicy,
    SyscallContext,
    SyscallDirection,
    SyscallRecord,
)
from .model import (
    DebugEvent,
    MemoryMap,
    RegisterFile,
    StopKind,
    StopReason,
    ThreadContext,
    find_map,
    load_maps,
    parse_maps_line,
)
from .symbols import (
    LoadedObject,
    StackFrame,
    SymbolEntry,
    SymbolKind,
    SymbolSource,
    backtrace,
    enumerate_objects,
    parse_elf,
    parse_elf_bytes,
    parse_symbols,
    resolve_address,
    resolve_symbol,
)
from .tools.cyclic import cyclic, cyclic_find

__version__ = "0.1.0"

__all__ = [
    "ALL",
    "AARCH64",
    "AMD64",
    "ArchSpec",
    "Breakpoint",
    "DebugBackend",
    "DebugEvent",
    "Debuggee",
    "FaultRule",
    "LifecycleState",
    "LoadedObject",
    "MemoryMap",
    "NoticeKind",
    "PtraceBackend",
    "RawStopNotice",
    "RegisterFile",
    "ResumeMode",
    "RunControl",
    "SignalAction",
    "SignalPolicy",
    "StackFrame",
    "StdioMode",
    "StopKind",
    "StopReason",
    "SymbolEntry",
    "SymbolKind",
    "SymbolSource",
    "SyscallContext",
    "SyscallDirection",
    "SyscallRecord",
    "ThreadContext",
    "TraceeHandle",
    "TrapKind",
    "Watchpoint",
    "WatchTrigger",
    "backtrace",
    "cyclic",
    "cyclic_find",
    "detect_arch",
    "enumerate_objects",
    "errors",
    "find_map",
    "load_maps",
    "parse_elf",
    "parse_elf_bytes",
    "parse_maps_line",
    "parse_symbols",
    "resolve_address",
    "resolve_symbol",
    "syscall_name",
    "syscall_number",
    "__version__",
]
