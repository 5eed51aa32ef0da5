"""Shared fixtures: built allocators, instrumented guard target, env knobs.

Scale knobs:
  HEAPPROBE_ACCEPT_FULL=1    run acceptance criteria at their stated budgets
                             (10-minute campaigns, 10^4-trace sweeps) instead
                             of the reduced desk-scale defaults.
  HEAPPROBE_ACCEPT_NATIVE=0  skip criteria that need the native allocator
                             even when it is loadable.
"""

from __future__ import annotations

import os
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parents[1]
ALLOC_DIR = REPO / "allocators"
BUILD_DIR = ALLOC_DIR / "build"

FULL = os.environ.get("HEAPPROBE_ACCEPT_FULL") == "1"

_acceptance_results: list[tuple[str, str]] = []


def record_criterion(name: str, status: str) -> None:
    _acceptance_results.append((name, status))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, status in _acceptance_results:
        terminalreporter.write_line(f"[{status}] {name}")


def _ensure_built() -> None:
    want = ["libunsafe_unlink.so", "libchecked.so", "libpage.so"]
    if all((BUILD_DIR / w).is_file() for w in want):
        return
    subprocess.run(["make", "-C", str(ALLOC_DIR)], check=True,
                   capture_output=True)


@pytest.fixture(scope="session", autouse=True)
def allocators_built():
    _ensure_built()
    os.environ.setdefault("HEAPPROBE_ALLOCATOR_DIR", str(BUILD_DIR))
    return BUILD_DIR


@pytest.fixture(scope="session")
def guard_lib(tmp_path_factory, allocators_built) -> Path:
    """Instrumented bump allocator with canaries and call counters."""
    src = Path(__file__).parent / "fixtures" / "guard_alloc.c"
    out = tmp_path_factory.mktemp("guard") / "libguard.so"
    subprocess.run(
        ["cc", "-shared", "-fPIC", "-O1", "-Wall", "-Wextra", "-Werror",
         "-o", str(out), str(src)],
        check=True, capture_output=True)
    return out


def _native_available() -> bool:
    if os.environ.get("HEAPPROBE_ACCEPT_NATIVE") == "0":
        return False
    code = ("from heapprobe.target import AllocatorTarget;"
            "AllocatorTarget.from_descriptor('native')")
    proc = subprocess.run([sys.executable, "-c", code], capture_output=True)
    return proc.returncode == 0


@pytest.fixture(scope="session")
def native_available() -> bool:
    return _native_available()


@pytest.fixture
def fresh_so(tmp_path, allocators_built):
    """Copy a bundled allocator under a unique path so dlopen gives a
    pristine instance (same-path loads share state within a process)."""
    counter = [0]

    def make(name: str) -> str:
        lib = {"unsafe-unlink": "libunsafe_unlink.so",
               "checked": "libchecked.so",
               "page": "libpage.so"}[name]
        counter[0] += 1
        dst = tmp_path / f"{counter[0]}-{lib}"
        shutil.copy(BUILD_DIR / lib, dst)
        return str(dst)

    return make
