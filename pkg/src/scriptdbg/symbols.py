"""ELF symbol tables, runtime address resolution and stack walking.

Works without any debug information: function addresses come from the
dynamic and static symbol tables (whichever survive stripping) and stack
traces follow the saved-frame-pointer chain. The parser never trusts a
field it has not bounds-checked, so truncated or mutated files produce
``ElfParseError`` instead of crashes.
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass
from typing import Callable

from .arch import EM_AARCH64, EM_X86_64
from .errors import AmbiguousSymbol, ElfParseError, MemoryAccessError, SymbolNotFound, UnsupportedTarget
from .model import MemoryMap, find_map

ET_EXEC = 2
ET_DYN = 3
PT_LOAD = 1
SHT_SYMTAB = 2
SHT_DYNSYM = 11
STT_OBJECT = 1
STT_FUNC = 2

_SUPPORTED_MACHINES = (EM_X86_64, EM_AARCH64)
_MAX_SECTIONS = 65535
_MAX_SEGMENTS = 65535
_MAX_NAME = 4096
_SYM_ENTRY = 24
_PAGE_MASK = ~0xFFF


class SymbolKind(enum.Enum):
    FUNC = "func"
    OBJECT = "object"
    OTHER = "other"


class SymbolSource(enum.Enum):
    DYNSYM = "dynsym"
    SYMTAB = "symtab"


@dataclass(frozen=True)
class SymbolEntry:
    """One defined symbol; ``value`` is the link-time address from the table."""

    name: str
    value: int
    size: int
    kind: SymbolKind
    source_table: SymbolSource


@dataclass(frozen=True)
class ElfInfo:
    machine: int
    e_type: int
    entry: int
    # (vaddr, file_offset, filesz, memsz) per loadable segment
    load_segments: tuple[tuple[int, int, int, int], ...]
    symbols: tuple[SymbolEntry, ...]

    @property
    def link_base(self) -> int:
        if not self.load_segments:
            return 0
        return min(seg[0] for seg in self.load_segments) & _PAGE_MASK

    @property
    def is_pie(self) -> bool:
        return self.e_type == ET_DYN


@dataclass
class LoadedObject:
    """One file-backed object in a live address space."""

    path: str
    base: int
    is_pie: bool
    symbols: list[SymbolEntry]
    link_base: int = 0
    span_end: int = 0

    def runtime_address(self, value: int) -> int:
        if self.is_pie:
            return self.base + (value - self.link_base)
        return value

    def link_value(self, addr: int) -> int:
        if self.is_pie:
            return addr - self.base + self.link_base
        return addr


@dataclass(frozen=True)
class StackFrame:
    """One walked frame; frame 0 carries the current pc as its address."""

    return_address: int
    frame_base: int
    symbol: tuple[str, int] | None = None


class _Reader:
    """Bounds-checked little-endian field access over a byte buffer."""

    def __init__(self, data: bytes):
        self.data = data

    def _get(self, offset: int, size: int) -> bytes:
        if offset < 0 or offset + size > len(self.data):
            raise ElfParseError(max(offset, 0), f"read of {size} bytes past end of file")
        return self.data[offset : offset + size]

    def u8(self, offset: int) -> int:
        return self._get(offset, 1)[0]

    def u16(self, offset: int) -> int:
        return struct.unpack("<H", self._get(offset, 2))[0]

    def u32(self, offset: int) -> int:
        return struct.unpack("<I", self._get(offset, 4))[0]

    def u64(self, offset: int) -> int:
        return struct.unpack("<Q", self._get(offset, 8))[0]

    def cstring(self, offset: int) -> str:
        if offset < 0 or offset >= len(self.data):
            raise ElfParseError(max(offset, 0), "string offset past end of file")
        end = self.data.find(b"\x00", offset, offset + _MAX_NAME)
        if end < 0:
            raise ElfParseError(offset, "unterminated string")
        return self.data[offset:end].decode("latin-1")


_elf_cache: dict[tuple, ElfInfo] = {}


def parse_elf(path: str) -> ElfInfo:
    """Parse header, loadable segments and both symbol tables of an ELF64 file."""
    st = os.stat(path)
    key = (st.st_dev, st.st_ino, st.st_mtime_ns, st.st_size)
    cached = _elf_cache.get(key)
    if cached is not None:
        return cached
    with open(path, "rb") as f:
        data = f.read()
    info = parse_elf_bytes(data)
    _elf_cache[key] = info
    return info


def parse_elf_bytes(data: bytes) -> ElfInfo:
    try:
        return _parse_elf_bytes(data)
    except ElfParseError:
        raise
    except (struct.error, ValueError, OverflowError, MemoryError) as exc:
        raise ElfParseError(0, f"malformed ELF: {exc}") from None


def _parse_elf_bytes(data: bytes) -> ElfInfo:
    r = _Reader(data)
    if r._get(0, 4) != b"\x7fELF":
        raise ElfParseError(0, "bad magic")
    if r.u8(4) != 2:
        raise ElfParseError(4, "not a 64-bit ELF")
    if r.u8(5) != 1:
        raise ElfParseError(5, "not little-endian")
    e_type = r.u16(16)
    machine = r.u16(18)
    entry = r.u64(24)
    phoff = r.u64(32)
    shoff = r.u64(40)
    phentsize = r.u16(54)
    phnum = r.u16(56)
    shentsize = r.u16(58)
    shnum = r.u16(60)

    if phnum > _MAX_SEGMENTS or shnum > _MAX_SECTIONS:
        raise ElfParseError(56, "implausible table sizes")

    segments = []
    if phnum and phentsize >= 56:
        for i in range(phnum):
            off = phoff + i * phentsize
            if r.u32(off) == PT_LOAD:
                segments.append((r.u64(off + 16), r.u64(off + 8), r.u64(off + 32), r.u64(off + 40)))

    symbols: list[SymbolEntry] = []
    if shoff and shnum and shentsize >= 64:
        sections = []
        for i in range(shnum):
            off = shoff + i * shentsize
            sections.append({
                "type": r.u32(off + 4),
                "offset": r.u64(off + 24),
                "size": r.u64(off + 32),
                "link": r.u32(off + 40),
                "entsize": r.u64(off + 56),
            })
        for sec in sections:
            if sec["type"] not in (SHT_SYMTAB, SHT_DYNSYM):
                continue
            source = SymbolSource.SYMTAB if sec["type"] == SHT_SYMTAB else SymbolSource.DYNSYM
            entsize = sec["entsize"]
            if entsize < _SYM_ENTRY:
                raise ElfParseError(0, f"symbol entry size {entsize} too small")
            if sec["link"] >= len(sections):
                raise ElfParseError(0, "symbol table links to a missing string table")
            strtab = sections[sec["link"]]
            count = min(sec["size"] // entsize, 1 << 20)
            for i in range(count):
                off = sec["offset"] + i * entsize
                name_off = r.u32(off)
                info = r.u8(off + 4)
                shndx = r.u16(off + 6)
                value = r.u64(off + 8)
                size = r.u64(off + 16)
                if name_off == 0 or shndx == 0:
                    continue  # unnamed or undefined (imported)
                name = r.cstring(strtab["offset"] + name_off)
                if not name:
                    continue
                kind = {STT_FUNC: SymbolKind.FUNC, STT_OBJECT: SymbolKind.OBJECT}.get(info & 0xF, SymbolKind.OTHER)
                symbols.append(SymbolEntry(name, value, size, kind, source))

    return ElfInfo(machine=machine, e_type=e_type, entry=entry,
                   load_segments=tuple(segments), symbols=tuple(symbols))


def parse_symbols(path: str) -> list[SymbolEntry]:
    """Defined symbols from both tables, deduplicated by name.

    On a name collision the static table wins over the dynamic one, and
    within a table an entry with a size beats a sizeless one.
    """
    info = parse_elf(path)
    if info.machine not in _SUPPORTED_MACHINES:
        raise UnsupportedTarget(f"ELF machine {info.machine} not supported")
    return dedup_symbols(info.symbols)


def dedup_symbols(symbols) -> list[SymbolEntry]:
    def rank(sym: SymbolEntry) -> tuple:
        return (sym.source_table is SymbolSource.SYMTAB, sym.size > 0)

    best: dict[str, SymbolEntry] = {}
    for sym in symbols:
        cur = best.get(sym.name)
        if cur is None or rank(sym) > rank(cur):
            best[sym.name] = sym
    return sorted(best.values(), key=lambda s: (s.value, s.name))


# ---------------------------------------------------------------------------
# Live-process views.


def enumerate_objects(maps: list[MemoryMap]) -> list[LoadedObject]:
    """One object per distinct file-backed mapping group, with its load base."""
    grouped: dict[str, list[MemoryMap]] = {}
    for m in maps:
        if not m.path or m.path.startswith("["):
            continue
        grouped.setdefault(m.path, []).append(m)
    objects = []
    for path, group in grouped.items():
        try:
            info = parse_elf(path)
        except (OSError, ElfParseError):
            continue  # mapped non-ELF file (locale archives, caches, ...)
        if info.machine not in _SUPPORTED_MACHINES:
            continue
        base = min(m.start for m in group)
        objects.append(LoadedObject(
            path=path,
            base=base,
            is_pie=info.is_pie,
            symbols=dedup_symbols(info.symbols),
            link_base=info.link_base,
            span_end=max(m.end for m in group),
        ))
    objects.sort(key=lambda o: o.base)
    return objects


def resolve_symbol(objects: list[LoadedObject], name: str, object_filter: str | None = None) -> int:
    """Runtime address of a named symbol across the loaded objects."""
    candidates = []
    for obj in objects:
        if object_filter is not None and object_filter not in obj.path:
            continue
        for sym in obj.symbols:
            if sym.name == name:
                candidates.append((obj, sym))
                break
    if not candidates:
        raise SymbolNotFound(f"symbol {name!r} not found" + (f" in {object_filter}" if object_filter else ""))
    if len(candidates) > 1:
        raise AmbiguousSymbol(name, [obj.path for obj, _ in candidates])
    obj, sym = candidates[0]
    return obj.runtime_address(sym.value)


def resolve_address(objects: list[LoadedObject], addr: int) -> tuple[str, str | None, int] | None:
    """Map a runtime address back to (object path, symbol name, offset)."""
    containing = None
    for obj in objects:
        if obj.base <= addr < obj.span_end:
            containing = obj
            break
    if containing is None:
        return None
    rel = containing.link_value(addr)
    innermost = None
    for sym in containing.symbols:
        if sym.kind is not SymbolKind.FUNC or sym.size == 0:
            continue
        if sym.value <= rel < sym.value + sym.size:
            if innermost is None or sym.size < innermost.size:
                innermost = sym
    if innermost is not None:
        return (containing.path, innermost.name, rel - innermost.value)
    # Only sizeless symbols available: nearest preceding function marker.
    preceding = None
    for sym in containing.symbols:
        if sym.kind is SymbolKind.FUNC and sym.value <= rel:
            if preceding is None or sym.value > preceding.value:
                preceding = sym
    if preceding is not None:
        return (containing.path, preceding.name, rel - preceding.value)
    return (containing.path, None, addr - containing.base)


def backtrace(read_memory: Callable[[int, int], bytes], maps: list[MemoryMap],
              objects: list[LoadedObject], pc: int, fp: int, sp: int,
              max_depth: int = 64) -> list[StackFrame]:
    """Walk the saved-frame-pointer chain; requires frame pointers, no unwind data.

    Frame 0 is synthesized from the current pc/fp. The walk stops at
    max_depth, a null or non-increasing frame pointer, a frame pointer that
    leaves the stack mapping, or unreadable stack memory (the list is simply
    truncated; a clobbered chain is an expected post-crash condition).
    """

    def symbolize(addr: int) -> tuple[str, int] | None:
        res = resolve_address(objects, addr)
        if res is None or res[1] is None:
            return None
        return (res[1], res[2])

    frames: list[StackFrame] = []
    if max_depth <= 0:
        return frames
    frames.append(StackFrame(return_address=pc, frame_base=fp, symbol=symbolize(pc)))
    stack_map = find_map(maps, sp)
    cur_fp = fp
    while len(frames) < max_depth:
        if cur_fp == 0 or cur_fp % 8 != 0:
            break
        if stack_map is None or not stack_map.contains(cur_fp) or not stack_map.contains(cur_fp + 15):
            break
        try:
            raw = read_memory(cur_fp, 16)
        except MemoryAccessError:
            break
        saved_fp = int.from_bytes(raw[:8], "little")
        ret = int.from_bytes(raw[8:16], "little")
        if ret == 0 or saved_fp <= cur_fp:
            break
        frames.append(StackFrame(return_address=ret, frame_base=saved_fp, symbol=symbolize(ret)))
        cur_fp = saved_fp
    return frames
