"""Exception hierarchy for the debugger engine.

Operating-system permission failures are raised as the builtin
``PermissionError``; everything engine-specific derives from
:class:`ScriptDbgError`.
"""

from __future__ import annotations


class ScriptDbgError(Exception):
    """Base class for all engine errors."""


class SpawnError(ScriptDbgError):
    """The target could not be launched (missing file, not executable, exec failure)."""


class NoSuchProcess(ScriptDbgError):
    """No process with the requested pid exists."""


class NoSuchThread(ScriptDbgError):
    """The thread id is not part of the debuggee."""


class InvalidState(ScriptDbgError):
    """The operation is not legal in the debuggee's current lifecycle state."""


class ProcessLost(ScriptDbgError):
    """The debuggee vanished while we were waiting on it."""


class UnsupportedTarget(ScriptDbgError):
    """The target binary is not a supported architecture/class."""


class MemoryAccessError(ScriptDbgError):
    """A memory transfer touched an unmapped or unreadable address."""

    def __init__(self, address: int, message: str | None = None):
        super().__init__(message or f"cannot access memory at {address:#x}")
        self.address = address


class MapParseError(ScriptDbgError):
    """A /proc/<pid>/maps line did not parse."""

    def __init__(self, line: str, message: str | None = None):
        super().__init__(message or f"unparseable maps line: {line!r}")
        self.line = line


class BadLocation(ScriptDbgError):
    """A trap location is unusable (not executable, already trapped, ...)."""


class NoFreeSlot(ScriptDbgError):
    """All hardware debug slots are in use."""


class AlignmentError(ScriptDbgError):
    """A watched range is not naturally aligned or has an unsupported length."""


class NoSuchTrap(ScriptDbgError):
    """No breakpoint or watchpoint with that id exists."""


class SymbolNotFound(ScriptDbgError):
    """The symbol is not defined by any loaded object."""


class AmbiguousSymbol(ScriptDbgError):
    """The symbol is defined in several loaded objects and no filter was given."""

    def __init__(self, name: str, candidates: list[str]):
        super().__init__(f"symbol {name!r} defined in multiple objects: {', '.join(candidates)}")
        self.name = name
        self.candidates = candidates


class ElfParseError(ScriptDbgError):
    """The ELF file is malformed or truncated."""

    def __init__(self, offset: int, cause: str):
        super().__init__(f"bad ELF at offset {offset:#x}: {cause}")
        self.offset = offset
        self.cause = cause


class UnknownSyscall(ScriptDbgError):
    """A syscall name is not in the architecture's table."""


class InvalidContext(ScriptDbgError):
    """An operation was called outside the handler context that permits it."""


class RuleConflict(ScriptDbgError):
    """A fault rule is invalid or collides with an existing one."""


class PolicyError(ScriptDbgError):
    """A signal policy tried to override a non-overridable signal."""


class EndOfStream(ScriptDbgError):
    """The tracee exited and its stdio pipe is drained."""


class CapacityError(ScriptDbgError):
    """Requested pattern length exceeds the alphabet sequence capacity."""


class NotInPattern(ScriptDbgError):
    """The window does not occur in the generated pattern."""


class NoCrash(ScriptDbgError):
    """Triage ran the payload but the target exited without a fatal signal."""


class MapFormatError(ScriptDbgError):
    """A branch-map file line did not parse."""

    def __init__(self, line_number: int, message: str | None = None):
        super().__init__(message or f"bad branch map line {line_number}")
        self.line_number = line_number


class FixtureError(ScriptDbgError):
    """A bundled benchmark fixture is missing or unusable."""
