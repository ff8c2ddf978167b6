"""Architecture-neutral view of the debuggee: registers, threads, memory maps."""

from __future__ import annotations

import bisect
import enum
import struct
from dataclasses import dataclass

from .arch import ArchSpec
from .errors import MapParseError

_U64 = (1 << 64) - 1


class RegisterFile:
    """Complete general-purpose register snapshot for one thread.

    Registers are addressed by their ISA names (``rf["rip"]``, ``rf["x0"]``)
    and by ABI role through the properties below, so callers never need to
    know which concrete register carries the program counter or a syscall
    argument on the current architecture.
    """

    __slots__ = ("arch", "values")

    def __init__(self, arch: ArchSpec, values: dict[str, int] | None = None):
        self.arch = arch
        self.values: dict[str, int] = dict(values) if values else {name: 0 for name in arch.reg_names}

    def __getitem__(self, name: str) -> int:
        return self.values[name]

    def __setitem__(self, name: str, value: int) -> None:
        if name not in self.values:
            raise KeyError(f"no register {name!r} on {self.arch.name}")
        self.values[name] = value & _U64

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RegisterFile) and self.arch is other.arch and self.values == other.values

    def copy(self) -> "RegisterFile":
        return RegisterFile(self.arch, self.values)

    @property
    def pc(self) -> int:
        return self.values[self.arch.pc]

    @pc.setter
    def pc(self, value: int) -> None:
        self.values[self.arch.pc] = value & _U64

    @property
    def sp(self) -> int:
        return self.values[self.arch.sp]

    @sp.setter
    def sp(self, value: int) -> None:
        self.values[self.arch.sp] = value & _U64

    @property
    def fp(self) -> int:
        return self.values[self.arch.fp]

    @fp.setter
    def fp(self, value: int) -> None:
        self.values[self.arch.fp] = value & _U64

    @property
    def syscall_nr(self) -> int:
        return self.values[self.arch.syscall_nr]

    @property
    def syscall_ret(self) -> int:
        return self.values[self.arch.syscall_ret]

    @property
    def syscall_args(self) -> tuple[int, ...]:
        return tuple(self.values[name] for name in self.arch.syscall_args)

    @classmethod
    def from_prstatus(cls, arch: ArchSpec, raw: bytes) -> "RegisterFile":
        words = struct.unpack_from(f"<{len(arch.reg_names)}Q", raw)
        return cls(arch, dict(zip(arch.reg_names, words)))

    def to_prstatus(self) -> bytes:
        return struct.pack(f"<{len(self.arch.reg_names)}Q", *(self.values[n] for n in self.arch.reg_names))

    def __repr__(self) -> str:
        return f"<RegisterFile {self.arch.name} pc={self.pc:#x} sp={self.sp:#x}>"


class StopKind(enum.Enum):
    BREAKPOINT = "breakpoint"
    WATCHPOINT = "watchpoint"
    SYSCALL_ENTER = "syscall_enter"
    SYSCALL_EXIT = "syscall_exit"
    SIGNAL = "signal"
    STEP = "step"
    EXITED = "exited"
    THREAD_CREATED = "thread_created"


@dataclass(frozen=True)
class StopReason:
    """Why a thread (or the whole debuggee) stopped.

    Exactly one variant applies; the payload fields beyond ``kind`` are
    populated per variant and left None otherwise.
    """

    kind: StopKind
    trap_id: int | None = None        # BREAKPOINT / WATCHPOINT
    syscall_nr: int | None = None     # SYSCALL_ENTER / SYSCALL_EXIT
    syscall_ret: int | None = None    # SYSCALL_EXIT
    signo: int | None = None          # SIGNAL
    exit_code: int | None = None      # EXITED (negative signo if signal-killed)
    new_tid: int | None = None        # THREAD_CREATED

    @classmethod
    def breakpoint(cls, trap_id: int) -> "StopReason":
        return cls(StopKind.BREAKPOINT, trap_id=trap_id)

    @classmethod
    def watchpoint(cls, trap_id: int) -> "StopReason":
        return cls(StopKind.WATCHPOINT, trap_id=trap_id)

    @classmethod
    def syscall_enter(cls, nr: int) -> "StopReason":
        return cls(StopKind.SYSCALL_ENTER, syscall_nr=nr)

    @classmethod
    def syscall_exit(cls, nr: int, ret: int) -> "StopReason":
        return cls(StopKind.SYSCALL_EXIT, syscall_nr=nr, syscall_ret=ret)

    @classmethod
    def signal(cls, signo: int) -> "StopReason":
        return cls(StopKind.SIGNAL, signo=signo)

    @classmethod
    def step(cls) -> "StopReason":
        return cls(StopKind.STEP)

    @classmethod
    def exited(cls, code: int) -> "StopReason":
        return cls(StopKind.EXITED, exit_code=code)

    @classmethod
    def thread_created(cls, tid: int) -> "StopReason":
        return cls(StopKind.THREAD_CREATED, new_tid=tid)


@dataclass
class ThreadContext:
    """Per-thread stop state; register snapshot is valid only while stopped."""

    tid: int
    stop_reason: StopReason | None = None
    regs: RegisterFile | None = None
    in_syscall: bool = False


@dataclass(frozen=True)
class MemoryMap:
    """One /proc/<pid>/maps region."""

    start: int
    end: int
    readable: bool
    writable: bool
    executable: bool
    private: bool
    file_offset: int
    path: str | None = None

    def contains(self, addr: int) -> bool:
        return self.start <= addr < self.end

    @property
    def size(self) -> int:
        return self.end - self.start

    def __repr__(self) -> str:
        perms = "".join((
            "r" if self.readable else "-",
            "w" if self.writable else "-",
            "x" if self.executable else "-",
            "p" if self.private else "s",
        ))
        return f"<MemoryMap {self.start:#x}-{self.end:#x} {perms} {self.path or ''}>"


def parse_maps_line(line: str) -> MemoryMap:
    parts = line.split(maxsplit=5)
    if len(parts) < 5:
        raise MapParseError(line)
    addr_range, perms, offset, _dev, _inode = parts[:5]
    path = parts[5].rstrip("\n") if len(parts) == 6 else None
    try:
        start_s, end_s = addr_range.split("-")
        start, end = int(start_s, 16), int(end_s, 16)
        file_offset = int(offset, 16)
    except ValueError:
        raise MapParseError(line) from None
    if len(perms) < 4 or any(c not in "rwxps-" for c in perms):
        raise MapParseError(line, f"bad permission flags {perms!r}")
    if start >= end:
        raise MapParseError(line, "empty or inverted address range")
    return MemoryMap(
        start=start,
        end=end,
        readable=perms[0] == "r",
        writable=perms[1] == "w",
        executable=perms[2] == "x",
        private=perms[3] == "p",
        file_offset=file_offset,
        path=path,
    )


def load_maps(pid: int) -> list[MemoryMap]:
    """Parse /proc/<pid>/maps into a sorted, non-overlapping region list."""
    maps = []
    with open(f"/proc/{pid}/maps") as f:
        for line in f:
            if line.strip():
                maps.append(parse_maps_line(line))
    maps.sort(key=lambda m: m.start)
    for prev, cur in zip(maps, maps[1:]):
        if cur.start < prev.end:
            raise MapParseError(repr(cur), "overlapping regions")
    return maps


def find_map(maps: list[MemoryMap], addr: int) -> MemoryMap | None:
    """Binary-search the region containing addr; maps must be sorted by start."""
    idx = bisect.bisect_right([m.start for m in maps], addr) - 1
    if idx >= 0 and maps[idx].contains(addr):
        return maps[idx]
    return None


@dataclass(frozen=True)
class DebugEvent:
    """One engine-level event, globally ordered by seq."""

    tid: int
    reason: StopReason
    seq: int
    timestamp: int  # monotonic nanoseconds

    def __repr__(self) -> str:
        return f"<DebugEvent #{self.seq} tid={self.tid} {self.reason.kind.value}>"
