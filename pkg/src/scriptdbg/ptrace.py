"""Thin ctypes layer over ptrace(2) and the cross-process memory facilities.

Only mechanics live here: every call maps to one kernel request and OS
failures surface as ``OSError`` with the original errno. Interpretation of
wait statuses, lifecycle rules and trap bookkeeping belong to the layers
above.
"""

from __future__ import annotations

import ctypes
import os
import signal

_libc = ctypes.CDLL(None, use_errno=True)
_libc.ptrace.restype = ctypes.c_long
_libc.ptrace.argtypes = [ctypes.c_long, ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p]

TRACEME = 0
PEEKTEXT = 1
PEEKDATA = 2
PEEKUSER = 3
POKETEXT = 4
POKEDATA = 5
POKEUSER = 6
CONT = 7
KILL = 8
SINGLESTEP = 9
ATTACH = 16
DETACH = 17
SYSCALL = 24
SETOPTIONS = 0x4200
GETEVENTMSG = 0x4201
GETSIGINFO = 0x4202
GETREGSET = 0x4204
SETREGSET = 0x4205

O_TRACESYSGOOD = 0x01
O_TRACEFORK = 0x02
O_TRACEVFORK = 0x04
O_TRACECLONE = 0x08
O_TRACEEXEC = 0x10
O_TRACEEXIT = 0x40
O_EXITKILL = 0x100000

EVENT_FORK = 1
EVENT_VFORK = 2
EVENT_CLONE = 3
EVENT_EXEC = 4
EVENT_VFORK_DONE = 5
EVENT_EXIT = 6

NT_PRSTATUS = 1
NT_ARM_HW_BREAK = 0x402
NT_ARM_HW_WATCH = 0x403
NT_ARM_SYSTEM_CALL = 0x404

__WALL = 0x40000000

SYSCALL_TRAP_SIG = signal.SIGTRAP | 0x80

WORD_SIZE = 8
_WORD_MASK = (1 << 64) - 1

ADDR_NO_RANDOMIZE = 0x0040000

SYS_tgkill = 234  # same number on x86-64 and arm64


class _Iovec(ctypes.Structure):
    _fields_ = [("iov_base", ctypes.c_void_p), ("iov_len", ctypes.c_size_t)]


class Siginfo(ctypes.Structure):
    # Prefix of siginfo_t; enough for signo/code plus the fault address union.
    _fields_ = [
        ("si_signo", ctypes.c_int),
        ("si_errno", ctypes.c_int),
        ("si_code", ctypes.c_int),
        ("_pad0", ctypes.c_int),
        ("si_addr", ctypes.c_uint64),
        ("_rest", ctypes.c_byte * 104),
    ]


def _ptrace(request: int, pid: int, addr: int, data) -> int:
    ctypes.set_errno(0)
    result = _libc.ptrace(request, pid, ctypes.c_void_p(addr), data)
    err = ctypes.get_errno()
    if result == -1 and err != 0:
        raise OSError(err, f"ptrace request {request} on {pid}: {os.strerror(err)}")
    return result


def traceme() -> None:
    _ptrace(TRACEME, 0, 0, None)


def attach(tid: int) -> None:
    _ptrace(ATTACH, tid, 0, None)


def detach(tid: int, sig: int = 0) -> None:
    _ptrace(DETACH, tid, 0, ctypes.c_void_p(sig))


def cont(tid: int, sig: int = 0) -> None:
    _ptrace(CONT, tid, 0, ctypes.c_void_p(sig))


def syscall_resume(tid: int, sig: int = 0) -> None:
    _ptrace(SYSCALL, tid, 0, ctypes.c_void_p(sig))


def singlestep(tid: int, sig: int = 0) -> None:
    _ptrace(SINGLESTEP, tid, 0, ctypes.c_void_p(sig))


def set_options(tid: int, flags: int) -> None:
    _ptrace(SETOPTIONS, tid, 0, ctypes.c_void_p(flags))


def get_event_msg(tid: int) -> int:
    msg = ctypes.c_ulong()
    _ptrace(GETEVENTMSG, tid, 0, ctypes.byref(msg))
    return msg.value


def get_siginfo(tid: int) -> Siginfo:
    info = Siginfo()
    _ptrace(GETSIGINFO, tid, 0, ctypes.byref(info))
    return info


def peek_word(tid: int, addr: int) -> int:
    return _ptrace(PEEKDATA, tid, addr, None) & _WORD_MASK


def poke_word(tid: int, addr: int, word: int) -> None:
    _ptrace(POKEDATA, tid, addr, ctypes.c_void_p(word & _WORD_MASK))


def peek_user(tid: int, offset: int) -> int:
    return _ptrace(PEEKUSER, tid, offset, None) & _WORD_MASK


def poke_user(tid: int, offset: int, value: int) -> None:
    _ptrace(POKEUSER, tid, offset, ctypes.c_void_p(value & _WORD_MASK))


def get_regset(tid: int, nt: int, size: int) -> bytes:
    buf = ctypes.create_string_buffer(size)
    iov = _Iovec(ctypes.cast(buf, ctypes.c_void_p), size)
    _ptrace(GETREGSET, tid, nt, ctypes.byref(iov))
    return buf.raw[: iov.iov_len]


def set_regset(tid: int, nt: int, data: bytes) -> None:
    buf = ctypes.create_string_buffer(data, len(data))
    iov = _Iovec(ctypes.cast(buf, ctypes.c_void_p), len(data))
    _ptrace(SETREGSET, tid, nt, ctypes.byref(iov))


# ---------------------------------------------------------------------------
# Bulk memory transfer. process_vm_readv/writev honor page protections, so
# callers fall back to /proc/<pid>/mem (which forces access the way ptrace
# word transfers do) and finally to word-by-word ptrace.

_libc.process_vm_readv.restype = ctypes.c_ssize_t
_libc.process_vm_writev.restype = ctypes.c_ssize_t


def vm_read(pid: int, addr: int, size: int) -> bytes | None:
    """Bulk read; returns None when the facility is denied or faults."""
    if size == 0:
        return b""
    buf = ctypes.create_string_buffer(size)
    local = _Iovec(ctypes.cast(buf, ctypes.c_void_p), size)
    remote = _Iovec(addr, size)
    ctypes.set_errno(0)
    n = _libc.process_vm_readv(pid, ctypes.byref(local), 1, ctypes.byref(remote), 1, 0)
    if n != size:
        return None
    return buf.raw


def vm_write(pid: int, addr: int, data: bytes) -> bool:
    if not data:
        return True
    buf = ctypes.create_string_buffer(data, len(data))
    local = _Iovec(ctypes.cast(buf, ctypes.c_void_p), len(data))
    remote = _Iovec(addr, len(data))
    ctypes.set_errno(0)
    n = _libc.process_vm_writev(pid, ctypes.byref(local), 1, ctypes.byref(remote), 1, 0)
    return n == len(data)


def procmem_read(pid: int, addr: int, size: int) -> bytes | None:
    try:
        with open(f"/proc/{pid}/mem", "rb", buffering=0) as f:
            f.seek(addr)
            data = f.read(size)
        return data if data is not None and len(data) == size else None
    except OSError:
        return None


def procmem_write(pid: int, addr: int, data: bytes) -> bool:
    try:
        with open(f"/proc/{pid}/mem", "r+b", buffering=0) as f:
            f.seek(addr)
            f.write(data)
        return True
    except OSError:
        return False


# ---------------------------------------------------------------------------
# Process plumbing.


def personality_no_aslr() -> None:
    """Ask the kernel to disable address-space randomization for this process."""
    _libc.personality.restype = ctypes.c_int
    current = _libc.personality(0xFFFFFFFF)
    _libc.personality(current | ADDR_NO_RANDOMIZE)


def tgkill(pid: int, tid: int, sig: int) -> None:
    ctypes.set_errno(0)
    if _libc.syscall(SYS_tgkill, pid, tid, sig) != 0:
        err = ctypes.get_errno()
        raise OSError(err, os.strerror(err))


def waitpid_all(wait_for: int, nohang: bool = False) -> tuple[int, int] | None:
    """waitpid with __WALL so thread stops are reported; None if nohang and idle."""
    flags = __WALL | (os.WNOHANG if nohang else 0)
    pid, status = os.waitpid(wait_for, flags)
    if pid == 0:
        return None
    return pid, status
