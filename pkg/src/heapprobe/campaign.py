"""Campaign orchestration: input generation, workers, findings, dedup.

Inputs come from a seeded deterministic random stream by default, or from
a watched directory in external-fuzzer mode.  Every new dedup key is
auto-minimized and gets a PoC; crashes are counted and classified against
the security-check catalog but never enter the findings directory.
"""

from __future__ import annotations

import hashlib
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

from .codec import decode, encode
from .detector import ImpactReport
from .minimize import FlakyFindingError, MinimizationJob, minimize
from .model import ModelSpec
from .poc import EmitError, emit
from .runner import ForkServerRunner, Outcome, RunnerError

MIN_INPUT_LEN = 8
MAX_INPUT_LEN = 128


@dataclass
class CampaignSummary:
    target: str
    seed: int
    executions: int = 0
    findings: int = 0
    no_impact: int = 0
    crashes: int = 0
    timeouts: int = 0
    impact_counts: dict = field(default_factory=dict)
    abort_counts: dict = field(default_factory=dict)
    finding_keys: list = field(default_factory=list)
    duration_s: float = 0.0

    def counters(self) -> dict:
        """Everything that must be identical across deterministic reruns."""
        return {
            "executions": self.executions,
            "findings": self.findings,
            "no_impact": self.no_impact,
            "crashes": self.crashes,
            "timeouts": self.timeouts,
            "impact_counts": dict(sorted(self.impact_counts.items())),
            "abort_counts": dict(sorted(self.abort_counts.items())),
            "finding_keys": sorted(self.finding_keys),
        }

    def serialize(self) -> str:
        lines = [
            f"target {self.target}",
            f"seed {self.seed:#x}",
            f"executions {self.executions}",
            f"findings {self.findings}",
            f"no_impact {self.no_impact}",
            f"crashes {self.crashes}",
            f"timeouts {self.timeouts}",
            f"duration_s {self.duration_s:.1f}",
        ]
        for k, v in sorted(self.impact_counts.items()):
            lines.append(f"impact_{k} {v}")
        for k, v in sorted(self.abort_counts.items()):
            lines.append(f"abort_{k} {v}")
        for k in sorted(self.finding_keys):
            lines.append(f"finding {k}")
        return "\n".join(lines) + "\n"


def dedup_key(report: ImpactReport, spec: ModelSpec) -> str:
    """(impact, site, bug, triggering action kind), path-safe."""
    program = decode(bytes.fromhex(report.trace_hex), spec)
    if 0 <= report.action_index < len(program.actions):
        trigger = program.actions[report.action_index].kind.value
    else:
        trigger = "unknown"
    return f"{report.impact}_{report.site}_{report.bug}_{trigger}"


def _atomic_write(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, bytes):
        tmp.write_bytes(data)
    else:
        tmp.write_text(data)
    os.replace(tmp, path)


def _random_inputs(seed: int) -> Iterator[tuple[bytes, int]]:
    rng = random.Random(seed)
    while True:
        length = rng.randint(MIN_INPUT_LEN, MAX_INPUT_LEN)
        yield rng.randbytes(length), rng.getrandbits(64)


def _directory_inputs(input_dir: Path) -> Iterator[Optional[tuple[bytes, int]]]:
    """External-fuzzer mode: yields new files, None when the dir is idle."""
    seen: set[str] = set()
    while True:
        fresh = False
        for p in sorted(input_dir.iterdir()):
            if p.name in seen or not p.is_file():
                continue
            seen.add(p.name)
            try:
                data = p.read_bytes()
            except OSError:
                continue
            salt = int.from_bytes(hashlib.sha256(data).digest()[:8], "little")
            fresh = True
            yield data, salt
        if not fresh:
            yield None


class Campaign:
    def __init__(self, target_desc: str, spec: Optional[ModelSpec] = None,
                 out_dir: str = "campaign-out", seed: int = 0,
                 workers: int = 1, budget_s: float = 60.0,
                 input_dir: Optional[str] = None,
                 keep_duplicates: bool = False,
                 max_execs: Optional[int] = None,
                 stop_after_findings: Optional[int] = None,
                 exec_timeout: float = 2.0) -> None:
        self.target_desc = target_desc
        self.spec = spec or ModelSpec.default()
        self.out_dir = Path(out_dir)
        self.seed = seed
        self.workers = max(1, workers)
        self.budget_s = budget_s
        self.input_dir = Path(input_dir) if input_dir else None
        self.keep_duplicates = keep_duplicates
        self.max_execs = max_execs
        self.stop_after_findings = stop_after_findings
        self.exec_timeout = exec_timeout

        self.summary = CampaignSummary(target=target_desc, seed=seed)
        self._lock = threading.Lock()
        self._stop = False
        self._deadline = 0.0
        self._inputs: Iterator = iter(())
        self._seen_keys: set[str] = set()
        self._dup_counter: dict[str, int] = {}

    # ------------------------------------------------------------------

    def run(self) -> CampaignSummary:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "findings").mkdir(exist_ok=True)
        if self.input_dir is not None:
            self._inputs = _directory_inputs(self.input_dir)
        else:
            self._inputs = _random_inputs(self.seed)

        start = time.monotonic()
        self._deadline = start + self.budget_s
        threads = [threading.Thread(target=self._worker_loop, daemon=True)
                   for _ in range(self.workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        self.summary.duration_s = time.monotonic() - start
        if self.summary.executions == 0:
            raise RunnerError("zero executions within budget")
        _atomic_write(self.out_dir / "summary.txt", self.summary.serialize())
        return self.summary

    def _next_input(self) -> Optional[tuple[bytes, int]]:
        with self._lock:
            if self._stop or time.monotonic() > self._deadline:
                return None
            if (self.max_execs is not None
                    and self.summary.executions >= self.max_execs):
                return None
            item = next(self._inputs)
            if item is not None:
                # count at dispatch so max_execs bounds in-flight work too
                self.summary.executions += 1
            return item if item is not None else ("idle", 0)

    def _worker_loop(self) -> None:
        runner = ForkServerRunner(self.target_desc, self.spec,
                                  timeout=self.exec_timeout)
        try:
            while True:
                item = self._next_input()
                if item is None:
                    return
                if item[0] == "idle":
                    time.sleep(0.2)
                    continue
                trace, salt = item
                outcome = runner.run(trace, salt)
                self._record(outcome, trace, salt, runner)
        finally:
            runner.close()

    def _record(self, outcome: Outcome, trace: bytes, salt: int,
                runner: ForkServerRunner) -> None:
        s = self.summary
        if outcome.status == "error":
            raise RunnerError(f"worker error: {outcome.abort_message}")
        if outcome.status == "no-impact":
            with self._lock:
                s.no_impact += 1
            return
        if outcome.status == "timeout":
            with self._lock:
                s.timeouts += 1
            return
        if outcome.status == "crash":
            key = outcome.check_id or "unclassified"
            with self._lock:
                s.crashes += 1
                s.abort_counts[key] = s.abort_counts.get(key, 0) + 1
                if outcome.check_id is None and outcome.abort_message:
                    self._log_unclassified(outcome.abort_message)
            return

        report = outcome.report
        key = dedup_key(report, self.spec)
        with self._lock:
            s.findings += 1
            s.impact_counts[report.impact] = (
                s.impact_counts.get(report.impact, 0) + 1)
            fresh = key not in self._seen_keys
            if fresh:
                self._seen_keys.add(key)
                s.finding_keys.append(key)
                dirname = key
            elif self.keep_duplicates:
                n = self._dup_counter.get(key, 0) + 1
                self._dup_counter[key] = n
                dirname = f"{key}.dup{n}"
            else:
                dirname = None
            if (self.stop_after_findings is not None
                    and len(self._seen_keys) >= self.stop_after_findings):
                self._stop = True
        if dirname is not None:
            self._persist(dirname, report, trace, fresh, runner)

    def _log_unclassified(self, message: str) -> None:
        first = message.splitlines()[0][:200] if message else ""
        with open(self.out_dir / "unclassified_aborts.txt", "a") as fh:
            fh.write(first + "\n")

    def _persist(self, dirname: str, report: ImpactReport, trace: bytes,
                 fresh: bool, runner: ForkServerRunner) -> None:
        fdir = self.out_dir / "findings" / dirname
        fdir.mkdir(parents=True, exist_ok=True)
        _atomic_write(fdir / "report.txt", report.serialize())
        _atomic_write(fdir / "trace.bin", trace)
        if not fresh:
            return
        program = decode(trace, self.spec)
        job = MinimizationJob(program, self.target_desc, self.spec,
                              report.salt, (report.impact, report.site))
        try:
            minimized = minimize(job, runner)
        except FlakyFindingError as e:
            _atomic_write(fdir / "minimize_failed.txt", f"{e}\n")
            return
        _atomic_write(fdir / "min_trace.bin", encode(minimized, self.spec))
        try:
            _atomic_write(fdir / "poc.c", emit(minimized, report, self.spec))
        except EmitError as e:
            _atomic_write(fdir / "poc_failed.txt", f"{e}\n")


def fuzz(target_desc: str, spec: Optional[ModelSpec] = None,
         budget_s: float = 60.0, workers: int = 1, seed: int = 0,
         out_dir: str = "campaign-out", input_dir: Optional[str] = None,
         keep_duplicates: bool = False, max_execs: Optional[int] = None,
         stop_after_findings: Optional[int] = None,
         exec_timeout: float = 2.0) -> CampaignSummary:
    return Campaign(target_desc, spec, out_dir, seed, workers, budget_s,
                    input_dir, keep_duplicates, max_execs,
                    stop_after_findings, exec_timeout).run()


def coverage_report(out_dir: str) -> str:
    """Distinct classified checks observed by a campaign, plus misses."""
    from .checks import CATALOG

    summary_path = Path(out_dir) / "summary.txt"
    observed: dict[str, int] = {}
    if summary_path.is_file():
        for line in summary_path.read_text().splitlines():
            if line.startswith("abort_"):
                key, count = line.split()
                observed[key[len("abort_"):]] = int(count)
    hit = [c for c in CATALOG if c in observed]
    missed = [c for c in CATALOG if c not in observed]
    lines = [f"checks hit: {len(hit)}/{len(CATALOG)}"]
    for c in hit:
        lines.append(f"  {c:4} {observed[c]:6}  {CATALOG[c]}")
    if "unclassified" in observed:
        lines.append(f"unclassified aborts: {observed['unclassified']}")
    lines.append("never hit: " + (", ".join(missed) if missed else "none"))
    return "\n".join(lines) + "\n"
