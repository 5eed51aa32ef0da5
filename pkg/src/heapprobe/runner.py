"""Process-isolated trace execution.

Every trace runs in a fresh process because heap corruption is sticky:
one corrupted execution would poison every later verdict in the same
address space.  Two runners share one Outcome interface:

* SpawnRunner    - one interpreter process per execution; simple, slow.
* ForkServerRunner - a resident server process that forks per execution;
  children inherit pristine copy-on-write allocator state, which makes
  campaigns and minimization about an order of magnitude faster.
"""

from __future__ import annotations

import os
import subprocess
import sys
import tempfile
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .checks import classify_abort
from .detector import ImpactReport
from .model import ModelSpec

DEFAULT_TIMEOUT = 2.0


class RunnerError(RuntimeError):
    pass


@dataclass
class Outcome:
    status: str  # "finding" | "no-impact" | "crash" | "timeout" | "error"
    report: Optional[ImpactReport] = None
    log: tuple[str, ...] = ()
    abort_message: str = ""
    check_id: Optional[str] = None
    signal: Optional[int] = None


def _parse_report_file(path: Path) -> tuple[str, Optional[ImpactReport], tuple]:
    try:
        text = path.read_text()
    except OSError:
        return "", None, ()
    status = ""
    report_lines = []
    log = []
    for line in text.splitlines():
        if line.startswith("status "):
            status = line.split(" ", 1)[1]
        elif line.startswith("log "):
            log.append(line.split(" ", 1)[1])
        elif line:
            report_lines.append(line)
    report = ImpactReport.parse("\n".join(report_lines)) if report_lines else None
    return status, report, tuple(log)


def _worker_env(target_desc: str) -> dict:
    env = dict(os.environ)
    if target_desc.startswith("preload:"):
        env["LD_PRELOAD"] = target_desc[len("preload:"):]
    return env


class _RunnerBase:
    def __init__(self, target_desc: str, spec: Optional[ModelSpec] = None,
                 timeout: float = DEFAULT_TIMEOUT) -> None:
        self.target_desc = target_desc
        self.spec = spec or ModelSpec.default()
        self.timeout = timeout
        self._tmpdir = tempfile.TemporaryDirectory(prefix="heapprobe-")
        self._spec_path = Path(self._tmpdir.name) / "spec.txt"
        self._spec_path.write_text(self.spec.to_text())

    def _scratch(self, stem: str) -> Path:
        return Path(self._tmpdir.name) / f"{stem}-{uuid.uuid4().hex}"

    def close(self) -> None:
        self._tmpdir.cleanup()

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class SpawnRunner(_RunnerBase):
    def run(self, trace: bytes, salt: int) -> Outcome:
        report_path = self._scratch("report")
        cmd = [
            sys.executable, "-m", "heapprobe.worker",
            "--target", self.target_desc,
            "--spec-file", str(self._spec_path),
            "--trace-hex", trace.hex() or "-",
            "--salt", f"{salt:x}",
            "--report", str(report_path),
        ]
        try:
            proc = subprocess.run(cmd, env=_worker_env(self.target_desc),
                                  capture_output=True, text=True,
                                  timeout=self.timeout)
        except subprocess.TimeoutExpired:
            return Outcome("timeout")
        finally:
            pass
        stderr = proc.stderr or ""
        status, report, log = _parse_report_file(report_path)
        report_path.unlink(missing_ok=True)
        if proc.returncode == 10:
            return Outcome("finding", report, log)
        if proc.returncode == 11:
            return Outcome("no-impact", report, log)
        if proc.returncode < 0:
            return Outcome("crash", abort_message=stderr.strip()[:1000],
                           check_id=classify_abort(stderr),
                           signal=-proc.returncode)
        return Outcome("error", abort_message=stderr.strip()[:1000])


class ForkServerRunner(_RunnerBase):
    def __init__(self, target_desc: str, spec: Optional[ModelSpec] = None,
                 timeout: float = DEFAULT_TIMEOUT) -> None:
        super().__init__(target_desc, spec, timeout)
        self._proc = subprocess.Popen(
            [sys.executable, "-m", "heapprobe.worker", "--serve",
             "--target", self.target_desc,
             "--spec-file", str(self._spec_path)],
            env=_worker_env(self.target_desc),
            stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            stderr=subprocess.PIPE, text=True)

    def run(self, trace: bytes, salt: int) -> Outcome:
        report_path = self._scratch("report")
        stderr_path = self._scratch("stderr")
        req = (f"RUN {trace.hex() or '-'} {salt:x} "
               f"{int(self.timeout * 1000)} {report_path} {stderr_path}\n")
        try:
            self._proc.stdin.write(req)
            self._proc.stdin.flush()
            resp = self._proc.stdout.readline()
        except (BrokenPipeError, OSError):
            resp = ""
        if not resp:
            err = ""
            if self._proc.poll() is not None and self._proc.stderr:
                err = self._proc.stderr.read()
            raise RunnerError(f"worker server died: {err.strip()[:500]}")
        token = resp.split()[1] if len(resp.split()) > 1 else "error:protocol"

        status, report, log = _parse_report_file(report_path)
        try:
            stderr = stderr_path.read_text(errors="replace")
        except OSError:
            stderr = ""
        report_path.unlink(missing_ok=True)
        stderr_path.unlink(missing_ok=True)

        if token == "finding":
            return Outcome("finding", report, log)
        if token == "no-impact":
            return Outcome("no-impact", report, log)
        if token == "timeout":
            return Outcome("timeout")
        if token.startswith("crash:"):
            return Outcome("crash", abort_message=stderr.strip()[:1000],
                           check_id=classify_abort(stderr),
                           signal=int(token.split(":")[1]))
        return Outcome("error", abort_message=stderr.strip()[:1000])

    def close(self) -> None:
        try:
            if self._proc.poll() is None:
                self._proc.stdin.write("EXIT\n")
                self._proc.stdin.flush()
                self._proc.wait(timeout=5)
        except (BrokenPipeError, OSError, subprocess.TimeoutExpired):
            self._proc.kill()
            self._proc.wait()
        finally:
            super().close()


def run_trace(trace: bytes, target_desc: str,
              spec: Optional[ModelSpec] = None, salt: int = 0,
              timeout: float = DEFAULT_TIMEOUT) -> Outcome:
    """One-off execution in a fresh interpreter process."""
    with SpawnRunner(target_desc, spec, timeout) as r:
        return r.run(trace, salt)
