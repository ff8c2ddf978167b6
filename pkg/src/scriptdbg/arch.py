"""Architecture tables: register layouts, ABI roles, trap encodings, debug registers.

Everything ISA-specific lives here so the rest of the engine can stay
architecture-neutral. Two 64-bit little-endian targets are described:
x86-64 ("amd64") and ARM64 ("aarch64").
"""

from __future__ import annotations

import functools
import importlib.resources
import struct
from dataclasses import dataclass

from .errors import ElfParseError, UnknownSyscall, UnsupportedTarget

EM_X86_64 = 62
EM_AARCH64 = 183

# x86-64 <sys/user.h>: offsetof(struct user, u_debugreg)
AMD64_DEBUGREG_OFFSET = 848

WATCH_TRIGGER_WRITE = "write"
WATCH_TRIGGER_READ_WRITE = "read_write"
WATCH_TRIGGER_EXECUTE = "execute"


@dataclass(frozen=True)
class ArchSpec:
    """Static description of one target architecture."""

    name: str
    elf_machine: int
    # Register names in NT_PRSTATUS regset order, one u64 each.
    reg_names: tuple[str, ...]
    pc: str
    sp: str
    fp: str
    syscall_nr: str
    syscall_ret: str
    syscall_args: tuple[str, ...]
    # Bytes patched over an instruction to get a trap, and how far past the
    # patch the CPU reports pc after hitting it.
    trap_bytes: bytes
    trap_pc_offset: int
    watch_slots: int
    # AArch64 cannot change the pending syscall number through the
    # general-purpose regset; it needs the dedicated one.
    syscall_nr_via_regset: bool

    @property
    def gp_names(self) -> tuple[str, ...]:
        return self.reg_names


AMD64 = ArchSpec(
    name="amd64",
    elf_machine=EM_X86_64,
    reg_names=(
        "r15", "r14", "r13", "r12", "rbp", "rbx", "r11", "r10",
        "r9", "r8", "rax", "rcx", "rdx", "rsi", "rdi", "orig_rax",
        "rip", "cs", "eflags", "rsp", "ss", "fs_base", "gs_base",
        "ds", "es", "fs", "gs",
    ),
    pc="rip",
    sp="rsp",
    fp="rbp",
    syscall_nr="orig_rax",
    syscall_ret="rax",
    syscall_args=("rdi", "rsi", "rdx", "r10", "r8", "r9"),
    trap_bytes=b"\xcc",
    trap_pc_offset=1,
    watch_slots=4,
    syscall_nr_via_regset=False,
)

AARCH64 = ArchSpec(
    name="aarch64",
    elf_machine=EM_AARCH64,
    reg_names=tuple(f"x{i}" for i in range(31)) + ("sp", "pc", "pstate"),
    pc="pc",
    sp="sp",
    fp="x29",
    syscall_nr="x8",
    syscall_ret="x0",
    syscall_args=("x0", "x1", "x2", "x3", "x4", "x5"),
    trap_bytes=bytes.fromhex("000020d4"),  # BRK #0, little-endian
    trap_pc_offset=0,
    watch_slots=4,
    syscall_nr_via_regset=True,
)

_BY_MACHINE = {spec.elf_machine: spec for spec in (AMD64, AARCH64)}
_BY_NAME = {spec.name: spec for spec in (AMD64, AARCH64)}


def arch_by_name(name: str) -> ArchSpec:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise UnsupportedTarget(f"unknown architecture {name!r}") from None


def detect_arch(path: str) -> ArchSpec:
    """Read an ELF header and return the matching ArchSpec.

    Rejects 32-bit and big-endian targets and unknown machines.
    """
    with open(path, "rb") as f:
        ident = f.read(20)
    if len(ident) < 20 or ident[:4] != b"\x7fELF":
        raise ElfParseError(0, "not an ELF file")
    if ident[4] != 2:
        raise UnsupportedTarget("only 64-bit targets are supported")
    if ident[5] != 1:
        raise UnsupportedTarget("only little-endian targets are supported")
    machine = struct.unpack_from("<H", ident, 18)[0]
    spec = _BY_MACHINE.get(machine)
    if spec is None:
        raise UnsupportedTarget(f"unsupported ELF machine {machine}")
    return spec


# ---------------------------------------------------------------------------
# Syscall number/name tables (shipped data file, one line per entry:
# "<arch> <nr> <name>").


@functools.lru_cache(maxsize=None)
def syscall_table(arch_name: str) -> dict[int, str]:
    table: dict[int, str] = {}
    text = importlib.resources.files("scriptdbg.data").joinpath("syscall_table.txt").read_text()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        arch, nr, name = line.split()
        if arch == arch_name:
            table[int(nr)] = name
    return table


@functools.lru_cache(maxsize=None)
def _name_to_nr(arch_name: str) -> dict[str, int]:
    return {name: nr for nr, name in syscall_table(arch_name).items()}


def syscall_name(arch: ArchSpec, nr: int) -> str:
    return syscall_table(arch.name).get(nr, f"syscall_{nr}")


def syscall_number(arch: ArchSpec, name: str) -> int:
    try:
        return _name_to_nr(arch.name)[name]
    except KeyError:
        raise UnknownSyscall(f"no syscall named {name!r} on {arch.name}") from None


# ---------------------------------------------------------------------------
# x86-64 debug register encoding. Four address slots DR0-DR3; DR7 holds the
# enable bit, trigger type and length for each; DR6 reports which slot fired.

_DR7_RW = {
    WATCH_TRIGGER_EXECUTE: 0b00,
    WATCH_TRIGGER_WRITE: 0b01,
    WATCH_TRIGGER_READ_WRITE: 0b11,
}
_DR7_LEN = {1: 0b00, 2: 0b01, 4: 0b11, 8: 0b10}


def encode_dr7(slots: dict[int, tuple[str, int]]) -> int:
    """Build a DR7 value enabling the given slots.

    ``slots`` maps slot index (0-3) to (trigger, length). Execute slots must
    use length 1 (encoded as 00 per the ISA).
    """
    value = 0
    for slot, (trigger, length) in slots.items():
        if not 0 <= slot <= 3:
            raise ValueError(f"bad debug slot {slot}")
        rw = _DR7_RW[trigger]
        ln = 0 if trigger == WATCH_TRIGGER_EXECUTE else _DR7_LEN[length]
        value |= 1 << (2 * slot)            # local enable
        value |= rw << (16 + 4 * slot)
        value |= ln << (18 + 4 * slot)
    return value


def decode_dr6(value: int) -> list[int]:
    """Return the slot indexes whose condition was detected."""
    return [slot for slot in range(4) if value & (1 << slot)]


# ---------------------------------------------------------------------------
# AArch64 hardware debug control word (per-slot "ctrl" field of the
# NT_ARM_HW_WATCH / NT_ARM_HW_BREAK regsets).

_AARCH64_LOAD = 0b01
_AARCH64_STORE = 0b10


def encode_aarch64_ctrl(trigger: str, length: int) -> int:
    """Encode one hardware-debug control word: enable, EL0-only, type, byte mask."""
    if trigger == WATCH_TRIGGER_EXECUTE:
        type_bits = 0
        bas = 0xF
    else:
        type_bits = _AARCH64_STORE if trigger == WATCH_TRIGGER_WRITE else (_AARCH64_LOAD | _AARCH64_STORE)
        bas = (1 << length) - 1
    return 1 | (0b10 << 1) | (type_bits << 3) | (bas << 5)
