"""Shared test infrastructure: C fixture compilation and external oracles.

Fixtures are small C programs compiled on demand (once per session) with
frame pointers enabled. Oracles deliberately go through external binutils
(nm, readelf, objdump) or independently written C helpers so engine results
are checked against something that shares none of its code.
"""

from __future__ import annotations

import re
import shutil
import subprocess
from dataclasses import dataclass
from pathlib import Path

import pytest

FIXTURE_DIR = Path(__file__).parent / "fixtures"

BASE_CFLAGS = ["-O0", "-g", "-fno-omit-frame-pointer", "-fno-stack-protector"]


@dataclass
class FixtureBuilder:
    build_dir: Path

    def build(self, source: str, *, pie: bool = False, static: bool = False,
              pthread: bool = False, freestanding: bool = False,
              shared: bool = False, out_name: str | None = None,
              extra_flags: tuple[str, ...] = ()) -> Path:
        src = FIXTURE_DIR / source
        name = out_name or src.stem + self._variant_tag(pie, static, freestanding, shared)
        out = self.build_dir / name
        if out.exists():
            return out
        cmd = ["cc", *BASE_CFLAGS]
        cmd.append("-pie" if pie else "-no-pie")
        if static:
            cmd.append("-static")
        if pthread:
            cmd.append("-pthread")
        if freestanding:
            cmd += ["-nostdlib", "-static"]
        if shared:
            cmd += ["-shared", "-fPIC"]
            cmd.remove("-no-pie")
        cmd += ["-o", str(out), str(src), *extra_flags]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(f"fixture build failed: {' '.join(cmd)}\n{proc.stderr}")
        return out

    @staticmethod
    def _variant_tag(pie, static, freestanding, shared) -> str:
        tag = ""
        if pie:
            tag += "_pie"
        if static:
            tag += "_static"
        if freestanding:
            tag += "_raw"
        if shared:
            tag += ".so"
        return tag


@pytest.fixture(scope="session")
def fixtures(tmp_path_factory) -> FixtureBuilder:
    return FixtureBuilder(build_dir=tmp_path_factory.mktemp("fixture-bin"))


# ---------------------------------------------------------------------------
# External oracles.


def nm_symbols(path: Path) -> dict[str, tuple[int, str]]:
    """{name: (address, type letter)} from binutils nm."""
    proc = subprocess.run(["nm", str(path)], capture_output=True, text=True, check=True)
    out = {}
    for line in proc.stdout.splitlines():
        parts = line.split()
        if len(parts) == 3:
            addr, letter, name = parts
            out[name] = (int(addr, 16), letter)
    return out


def nm_sizes(path: Path) -> dict[str, tuple[int, int]]:
    """{name: (address, size)} from nm -S."""
    proc = subprocess.run(["nm", "-S", str(path)], capture_output=True, text=True, check=True)
    out = {}
    for line in proc.stdout.splitlines():
        parts = line.split()
        if len(parts) == 4:
            addr, size, _letter, name = parts
            out[name] = (int(addr, 16), int(size, 16))
    return out


def readelf_header(path: Path) -> dict[str, str]:
    proc = subprocess.run(["readelf", "-h", str(path)], capture_output=True, text=True, check=True)
    fields = {}
    for line in proc.stdout.splitlines():
        if ":" in line:
            key, value = line.split(":", 1)
            fields[key.strip()] = value.strip()
    return fields


def readelf_entry(path: Path) -> int:
    return int(readelf_header(path)["Entry point address"], 16)


def readelf_min_load_vaddr(path: Path) -> int:
    proc = subprocess.run(["readelf", "-lW", str(path)], capture_output=True, text=True, check=True)
    vaddrs = []
    for line in proc.stdout.splitlines():
        parts = line.split()
        if parts and parts[0] == "LOAD":
            vaddrs.append(int(parts[2], 16))
    return min(vaddrs) & ~0xFFF


@dataclass(frozen=True)
class Insn:
    addr: int
    size: int
    mnemonic: str
    operands: str


def objdump_function(path: Path, func: str) -> list[Insn]:
    """Decoded instructions of one function, from the external disassembler."""
    proc = subprocess.run(["objdump", "-d", str(path)], capture_output=True, text=True, check=True)
    insns: list[Insn] = []
    in_func = False
    for line in proc.stdout.splitlines():
        header = re.match(r"^[0-9a-f]+ <(.+)>:$", line)
        if header:
            in_func = header.group(1) == func
            continue
        if not in_func:
            continue
        m = re.match(r"^\s+([0-9a-f]+):\s+((?:[0-9a-f]{2} )+)\s*(\S+)?\s*(.*)$", line)
        if m:
            addr = int(m.group(1), 16)
            size = len(m.group(2).split())
            insns.append(Insn(addr, size, m.group(3) or "", m.group(4).strip()))
    return insns


_COND_JUMPS = {
    "ja", "jae", "jb", "jbe", "jc", "jcxz", "jecxz", "jrcxz", "je", "jg", "jge",
    "jl", "jle", "jna", "jnae", "jnb", "jnbe", "jnc", "jne", "jng", "jnge",
    "jnl", "jnle", "jno", "jnp", "jns", "jnz", "jo", "jp", "jpe", "jpo", "js", "jz",
}


def conditional_branches(path: Path, func: str) -> list[tuple[int, int, int]]:
    """(branch_addr, taken_target, fallthrough_target) for each cond jump in func."""
    insns = objdump_function(path, func)
    branches = []
    for i, insn in enumerate(insns):
        if insn.mnemonic in _COND_JUMPS:
            target = int(insn.operands.split()[0], 16)
            fallthrough = insns[i + 1].addr
            branches.append((insn.addr, target, fallthrough))
    return branches


def run_bare(path: Path, argv: list[str] = (), stdin: bytes = b"") -> subprocess.CompletedProcess:
    """Run a fixture without any tracing, for output-comparison oracles."""
    return subprocess.run([str(path), *argv], input=stdin, capture_output=True, timeout=60)


def require_tool(name: str) -> None:
    if shutil.which(name) is None:
        pytest.skip(f"external tool {name} not available")
