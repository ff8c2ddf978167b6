"""Fixture compilation for the bindings test suite (self-contained)."""

from __future__ import annotations

import subprocess
from dataclasses import dataclass
from pathlib import Path

import pytest

FIXTURE_DIR = Path(__file__).parent / "fixtures"
BASE_CFLAGS = ["-O0", "-g", "-fno-omit-frame-pointer", "-fno-stack-protector", "-no-pie"]


@dataclass
class FixtureBuilder:
    build_dir: Path

    def build(self, source: str, *, static: bool = False,
              freestanding: bool = False) -> Path:
        src = FIXTURE_DIR / source
        tag = ("_static" if static else "") + ("_raw" if freestanding else "")
        out = self.build_dir / (src.stem + tag)
        if out.exists():
            return out
        cmd = ["cc", *BASE_CFLAGS]
        if static:
            cmd.append("-static")
        if freestanding:
            cmd += ["-nostdlib", "-static"]
        cmd += ["-o", str(out), str(src)]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(f"fixture build failed: {proc.stderr}")
        return out


@pytest.fixture(scope="session")
def fixtures(tmp_path_factory) -> FixtureBuilder:
    return FixtureBuilder(build_dir=tmp_path_factory.mktemp("bindings-fixtures"))
