"""Code and data traps: software breakpoints, hardware slots, watchpoints.

Software breakpoints patch the architecture's trap instruction over the
target and keep the displaced bytes for transparent reads and step-over.
Hardware breakpoints and watchpoints share the per-arch debug slot pool and
are programmed identically on every thread. On hosts whose debug registers
are inert (some container kernels accept the writes and never fire), the
slot accounting is kept and triggering falls back to the engine's
single-step emulation; `TrapTable.emulation_needed` tells the event loop
when that pump must run.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

from . import arch as _arch
from .backend import NoticeKind, PtraceBackend, RawStopNotice, TraceeHandle
from .errors import AlignmentError, BadLocation, InvalidState, NoFreeSlot, NoSuchTrap
from .model import MemoryMap, find_map


class TrapKind(enum.Enum):
    SOFTWARE = "software"
    HARDWARE = "hardware"


class WatchTrigger(enum.Enum):
    WRITE = _arch.WATCH_TRIGGER_WRITE
    READ_WRITE = _arch.WATCH_TRIGGER_READ_WRITE


@dataclass
class Breakpoint:
    """One code trap. ``saved_bytes`` is non-empty exactly while enabled (software)."""

    id: int
    address: int
    kind: TrapKind
    enabled: bool = True
    one_shot: bool = False
    hit_count: int = 0
    saved_bytes: bytes = b""
    callback: Optional[Callable] = None
    slot: int | None = None  # hardware only


@dataclass
class Watchpoint:
    """One data trap occupying a hardware debug slot."""

    id: int
    address: int
    length: int
    trigger: WatchTrigger
    slot: int
    enabled: bool = True
    hit_count: int = 0
    callback: Optional[Callable] = None


@dataclass
class _EmulatedHit:
    """Synthetic notice produced by the single-step watch pump."""

    tid: int
    trap_id: int
    is_watch: bool


class TrapTable:
    """All traps of one debuggee, plus the mechanics to arm and disarm them."""

    def __init__(self, backend: PtraceBackend, handle: TraceeHandle):
        self._backend = backend
        self._handle = handle
        self._next_id = 1
        self.breakpoints: dict[int, Breakpoint] = {}
        self.watchpoints: dict[int, Watchpoint] = {}
        self._slots: list[int | None] = [None] * handle.arch.watch_slots
        self._watch_values: dict[int, bytes] = {}
        self._hw_ok: bool | None = None

    # -- capability ----------------------------------------------------------

    def hw_available(self) -> bool:
        if self._hw_ok is None:
            self._hw_ok = self._backend.hw_debug_functional(self._handle)
        return self._hw_ok

    def emulation_needed(self) -> bool:
        if self.hw_available():
            return False
        if any(w.enabled for w in self.watchpoints.values()):
            return True
        return any(b.enabled and b.kind is TrapKind.HARDWARE for b in self.breakpoints.values())

    # -- breakpoints -----------------------------------------------------------

    def set_breakpoint(self, address: int, kind: TrapKind = TrapKind.SOFTWARE,
                       one_shot: bool = False, callback: Callable | None = None,
                       maps: list[MemoryMap] | None = None) -> Breakpoint:
        if maps is not None:
            m = find_map(maps, address)
            if m is None or not m.executable:
                raise BadLocation(f"{address:#x} is not in an executable mapping")
        if self._enabled_bp_at(address) is not None:
            raise BadLocation(f"{address:#x} already has an enabled breakpoint")
        bp = Breakpoint(id=self._next_id, address=address, kind=kind,
                        one_shot=one_shot, callback=callback)
        self._next_id += 1
        if kind is TrapKind.SOFTWARE:
            self._patch(bp)
        else:
            bp.slot = self._claim_slot(bp.id)
            self._program_slot(bp.slot, address, _arch.WATCH_TRIGGER_EXECUTE, 1)
        self.breakpoints[bp.id] = bp
        return bp

    def set_watchpoint(self, address: int, length: int, trigger: WatchTrigger,
                       callback: Callable | None = None) -> Watchpoint:
        if length not in (1, 2, 4, 8):
            raise AlignmentError(f"watch length must be 1/2/4/8, not {length}")
        if address % length != 0:
            raise AlignmentError(f"{address:#x} is not aligned to {length}")
        slot = self._claim_slot(self._next_id)
        wp = Watchpoint(id=self._next_id, address=address, length=length,
                        trigger=trigger, slot=slot, callback=callback)
        self._next_id += 1
        self._program_slot(slot, address, trigger.value, length)
        if not self.hw_available():
            self._watch_values[wp.id] = self._read_raw(address, length)
        self.watchpoints[wp.id] = wp
        return wp

    def clear(self, trap_id: int) -> None:
        trap = self._find(trap_id)
        self.set_enabled(trap_id, False)
        if isinstance(trap, Breakpoint):
            del self.breakpoints[trap_id]
        else:
            del self.watchpoints[trap_id]

    def set_enabled(self, trap_id: int, enabled: bool) -> None:
        trap = self._find(trap_id)
        if trap.enabled == enabled:
            return
        if isinstance(trap, Breakpoint):
            if trap.kind is TrapKind.SOFTWARE:
                if enabled:
                    if self._enabled_bp_at(trap.address) is not None:
                        raise BadLocation(f"{trap.address:#x} already has an enabled breakpoint")
                    self._patch(trap)
                else:
                    self._unpatch(trap)
            else:
                if enabled:
                    trap.slot = self._claim_slot(trap.id)
                    self._program_slot(trap.slot, trap.address, _arch.WATCH_TRIGGER_EXECUTE, 1)
                else:
                    self._release_slot(trap.slot)
                    trap.slot = None
        else:
            if enabled:
                # Slot may have been handed out meanwhile; re-claim.
                trap.slot = self._claim_slot(trap.id)
                self._program_slot(trap.slot, trap.address, trap.trigger.value, trap.length)
                if not self.hw_available():
                    self._watch_values[trap.id] = self._read_raw(trap.address, trap.length)
            else:
                self._release_slot(trap.slot)
                self._watch_values.pop(trap.id, None)
        trap.enabled = enabled

    def enabled_software_bp_at(self, address: int) -> Breakpoint | None:
        for bp in self.breakpoints.values():
            if bp.enabled and bp.kind is TrapKind.SOFTWARE and bp.address == address:
                return bp
        return None

    def _enabled_bp_at(self, address: int) -> Breakpoint | None:
        for bp in self.breakpoints.values():
            if bp.enabled and bp.address == address:
                return bp
        return None

    def _find(self, trap_id: int) -> Breakpoint | Watchpoint:
        trap = self.breakpoints.get(trap_id) or self.watchpoints.get(trap_id)
        if trap is None:
            raise NoSuchTrap(f"no trap with id {trap_id}")
        return trap

    def get(self, trap_id: int) -> Breakpoint | Watchpoint:
        return self._find(trap_id)

    # -- patching --------------------------------------------------------------

    def _patch(self, bp: Breakpoint) -> None:
        trap_bytes = self._handle.arch.trap_bytes
        bp.saved_bytes = self._read_raw(bp.address, len(trap_bytes))
        self._backend.write_memory_raw(self._handle, bp.address, trap_bytes)

    def _unpatch(self, bp: Breakpoint) -> None:
        if bp.saved_bytes:
            self._backend.write_memory_raw(self._handle, bp.address, bp.saved_bytes)
        bp.saved_bytes = b""

    def _read_raw(self, address: int, length: int) -> bytes:
        return self._backend.read_memory_raw(self._handle, address, length)

    def masked_read(self, address: int, length: int) -> bytes:
        """Raw read with enabled software patches replaced by the original bytes."""
        data = bytearray(self._read_raw(address, length))
        end = address + length
        for bp in self.breakpoints.values():
            if not (bp.enabled and bp.saved_bytes):
                continue
            lo = max(address, bp.address)
            hi = min(end, bp.address + len(bp.saved_bytes))
            for a in range(lo, hi):
                data[a - address] = bp.saved_bytes[a - bp.address]
        return bytes(data)

    # -- step-over protocol ------------------------------------------------------

    def step_over(self, tid: int) -> RawStopNotice | None:
        """Execute the displaced instruction under an enabled breakpoint.

        The thread must sit exactly at the breakpoint (pc already rewound).
        Returns None for the plain outcome (one step retired) or the raw
        notice when the step produced something else (exit, fault, ...).
        """
        regs = self._backend.read_registers(self._handle, tid)
        bp = self.enabled_software_bp_at(regs.pc)
        if bp is None:
            raise InvalidState(f"tid {tid} is not stopped at an enabled breakpoint")
        return self.step_displaced(tid, bp)

    def step_displaced(self, tid: int, bp: Breakpoint) -> RawStopNotice | None:
        self._unpatch(bp)
        self._backend.single_step(self._handle, tid)
        # Poll this tid only: other threads may have steps in flight and
        # their reports must stay queued for the pump.
        notice = self._backend.poll_notice(self._handle, tid, 1.0)
        if notice is None and self._thread_running(tid):
            # The displaced instruction blocked in the kernel; interrupt it
            # so the patch can go back in. The thread re-arms itself: either
            # the instruction retired (pc moved on) or it is still at the
            # breakpoint and the next resume repeats the step-over.
            self._backend.interrupt(self._handle, tid)
            notice = self._backend.poll_notice(self._handle, tid, 1.0)
        if self._handle.state.value in ("exited", "killed"):
            return notice
        self._patch(bp)
        if notice is None or (notice.kind is NoticeKind.STEP and notice.tid == tid):
            return None
        return notice

    def _thread_running(self, tid: int) -> bool:
        ts = self._handle._threads.get(tid)
        return ts is not None and ts.running

    # -- hardware slots ------------------------------------------------------------

    def _claim_slot(self, trap_id: int) -> int:
        for idx, owner in enumerate(self._slots):
            if owner is None:
                self._slots[idx] = trap_id
                return idx
        raise NoFreeSlot(f"all {len(self._slots)} debug slots are in use")

    def _release_slot(self, slot: int | None) -> None:
        if slot is not None:
            self._slots[slot] = None
            self._program_all_threads()

    def _program_slot(self, slot: int, address: int, trigger: str, length: int) -> None:
        self._program_all_threads()

    def _program_all_threads(self) -> None:
        if not self.hw_available():
            return
        layout: dict[int, tuple[str, int]] = {}
        addrs: dict[int, int] = {}
        for bp in self.breakpoints.values():
            if bp.enabled and bp.kind is TrapKind.HARDWARE and bp.slot is not None:
                layout[bp.slot] = (_arch.WATCH_TRIGGER_EXECUTE, 1)
                addrs[bp.slot] = bp.address
        for wp in self.watchpoints.values():
            if wp.enabled:
                layout[wp.slot] = (wp.trigger.value, wp.length)
                addrs[wp.slot] = wp.address
        dr7 = _arch.encode_dr7(layout)
        for tid in self._handle.tids:
            for slot, addr in addrs.items():
                self._backend.write_debug_slot(self._handle, tid, slot, addr)
            self._backend.write_debug_control(self._handle, tid, dr7)

    def on_thread_created(self, tid: int) -> None:
        """Mirror the debug-register program onto a freshly cloned thread."""
        self._program_all_threads()

    def decode_hw_stop(self, tid: int) -> Breakpoint | Watchpoint | None:
        """Map a debug-status hit on tid back to the owning trap (hw mode)."""
        if not self.hw_available():
            return None
        status = self._backend.read_debug_status(self._handle, tid)
        hits = _arch.decode_dr6(status)
        if not hits:
            return None
        self._backend.clear_debug_status(self._handle, tid)
        owner = self._slots[hits[0]]
        if owner is None:
            return None
        trap = self.breakpoints.get(owner) or self.watchpoints.get(owner)
        return trap

    # -- emulation support --------------------------------------------------------

    def check_emulated_watch_hit(self, tid: int) -> _EmulatedHit | None:
        """Compare watched ranges against their last known values."""
        for wp in self.watchpoints.values():
            if not wp.enabled:
                continue
            current = self._read_raw(wp.address, wp.length)
            if current != self._watch_values.get(wp.id):
                self._watch_values[wp.id] = current
                return _EmulatedHit(tid=tid, trap_id=wp.id, is_watch=True)
        return None

    def emulated_exec_bp_at(self, pc: int) -> Breakpoint | None:
        for bp in self.breakpoints.values():
            if bp.enabled and bp.kind is TrapKind.HARDWARE and bp.address == pc:
                return bp
        return None

    # -- teardown -------------------------------------------------------------------

    def remove_all(self) -> None:
        """Restore every patched byte and free every slot (detach path)."""
        for bp in list(self.breakpoints.values()):
            if bp.enabled:
                self.set_enabled(bp.id, False)
        for wp in list(self.watchpoints.values()):
            if wp.enabled:
                self.set_enabled(wp.id, False)
        self.breakpoints.clear()
        self.watchpoints.clear()
