"""Command line interface.

Subcommands: fuzz, replay, minimize, emit-poc, coverage, selftest.
"""

from __future__ import annotations

import argparse
import os
import random
import sys
from pathlib import Path

from .model import ModelSpec, SpecError


def _parse_budget(text: str) -> float:
    text = text.strip()
    mult = 1.0
    if text.endswith("s"):
        text = text[:-1]
    elif text.endswith("m"):
        text, mult = text[:-1], 60.0
    elif text.endswith("h"):
        text, mult = text[:-1], 3600.0
    return float(text) * mult


def _load_spec(path) -> ModelSpec:
    if not path:
        return ModelSpec.default()
    with open(path) as fh:
        return ModelSpec.parse(fh.read())


def _read_trace(arg: str) -> bytes:
    """Accepts a hex string or @path to a binary trace file."""
    if arg.startswith("@"):
        return Path(arg[1:]).read_bytes()
    return bytes.fromhex(arg)


def _cmd_fuzz(args) -> int:
    from .campaign import fuzz

    seed = int(args.seed, 16) if args.seed else random.getrandbits(64)
    summary = fuzz(
        args.target,
        spec=_load_spec(args.spec),
        budget_s=_parse_budget(args.budget),
        workers=args.workers,
        seed=seed,
        out_dir=args.out,
        input_dir=args.input_dir,
        keep_duplicates=args.keep_duplicates,
        max_execs=args.max_execs,
        stop_after_findings=args.stop_after_findings,
    )
    sys.stdout.write(summary.serialize())
    return 0


def _cmd_replay(args) -> int:
    from .runner import run_trace

    outcome = run_trace(_read_trace(args.trace), args.target,
                        _load_spec(args.spec), int(args.salt, 16))
    print(f"status {outcome.status}")
    if outcome.report is not None:
        sys.stdout.write(outcome.report.serialize())
    if outcome.status == "crash":
        print(f"signal {outcome.signal}")
        print(f"check_id {outcome.check_id or '-'}")
        if outcome.abort_message:
            print(f"abort_message {outcome.abort_message.splitlines()[0]}")
    if args.verbose:
        for line in outcome.log:
            print(f"log {line}")
    return 0 if outcome.status in ("finding", "no-impact") else 1


def _cmd_minimize(args) -> int:
    from .codec import decode, encode
    from .detector import ImpactReport
    from .minimize import FlakyFindingError, MinimizationJob, minimize

    report = ImpactReport.parse(Path(args.report).read_text())
    spec = _load_spec(args.spec)
    program = decode(bytes.fromhex(report.trace_hex), spec)
    job = MinimizationJob(program, args.target or report.target, spec,
                          report.salt, (report.impact, report.site))
    try:
        minimized = minimize(job)
    except FlakyFindingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    out = Path(args.out) if args.out else Path(args.report).with_name(
        "min_trace.bin")
    out.write_bytes(encode(minimized, spec))
    print(f"actions {len(program.actions)} -> {len(minimized.actions)}")
    print(f"wrote {out}")
    return 0


def _cmd_emit_poc(args) -> int:
    import tempfile

    from .codec import decode
    from .detector import ImpactReport
    from .minimize import MinimizationJob, get_impact
    from .poc import compile_poc, emit, poc_filename, run_poc
    from .runner import SpawnRunner

    report = ImpactReport.parse(Path(args.report).read_text())
    spec = _load_spec(args.spec)
    if args.trace:
        trace = _read_trace(args.trace)
    else:
        min_path = Path(args.report).with_name("min_trace.bin")
        trace = (min_path.read_bytes() if min_path.is_file()
                 else bytes.fromhex(report.trace_hex))
    program = decode(trace, spec)

    # refuse to emit if the trace no longer reproduces the report
    with SpawnRunner(report.target, spec) as runner:
        got = get_impact(runner, program, spec, report.salt)
    if got != (report.impact, report.site):
        print(f"error: stale finding: trace now yields {got}", file=sys.stderr)
        return 1

    source = emit(program, report, spec)
    out = Path(args.out) if args.out else Path(poc_filename(report))
    out.write_text(source)
    print(f"wrote {out}")
    if args.check:
        with tempfile.TemporaryDirectory() as td:
            binary = Path(td) / "poc"
            compile_poc(out, binary, args.cc)
            rc = run_poc(binary)
        print(f"poc exit status {rc}")
        return 0 if rc == 0 else 1
    return 0


def _cmd_coverage(args) -> int:
    from .campaign import coverage_report

    sys.stdout.write(coverage_report(args.out))
    return 0


def _cmd_selftest(args) -> int:
    import random as _random

    from .codec import decode, encode
    from .target import AllocatorTarget, TargetError

    failures = 0

    def check(name: str, fn) -> None:
        nonlocal failures
        try:
            fn()
            print(f"ok   {name}")
        except Exception as e:  # noqa: BLE001 - selftest reports everything
            print(f"FAIL {name}: {e}")
            failures += 1

    def codec_round_trip():
        rng = _random.Random(0)
        for _ in range(1000):
            data = rng.randbytes(rng.randint(0, 64))
            p = decode(data)
            assert decode(encode(p)).actions == p.actions

    check("codec round trip on 1000 random inputs", codec_round_trip)
    for name in ("unsafe-unlink", "checked", "page"):
        check(f"bundled target {name} loads",
              lambda n=name: AllocatorTarget.from_descriptor(f"bundled:{n}"))
    check("native target loads",
          lambda: AllocatorTarget.from_descriptor("native"))

    def quick_exec():
        from .runner import run_trace

        out = run_trace(b"", "bundled:page")
        assert out.status == "no-impact", out.status

    check("empty trace executes with no impact", quick_exec)
    print("selftest " + ("FAILED" if failures else "passed"))
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heapprobe",
        description="Discover heap-exploitation primitives in allocators "
                    "by fuzzing action sequences.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuzz", help="run a fuzzing campaign")
    p.add_argument("--target", required=True,
                   help="native | so:PATH | bundled:NAME | preload:PATH")
    p.add_argument("--spec", help="model spec file")
    p.add_argument("--budget", default="60s", help="wall time, e.g. 30s/10m/1h")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--seed", help="campaign seed (hex)")
    p.add_argument("--out", default="campaign-out")
    p.add_argument("--input-dir", help="consume inputs from this directory")
    p.add_argument("--keep-duplicates", action="store_true")
    p.add_argument("--max-execs", type=int,
                   help="stop after this many executions")
    p.add_argument("--stop-after-findings", type=int,
                   help="stop after this many distinct findings")
    p.set_defaults(func=_cmd_fuzz)

    p = sub.add_parser("replay", help="re-execute one trace")
    p.add_argument("--target", required=True)
    p.add_argument("--spec")
    p.add_argument("--trace", required=True, help="hex string or @file")
    p.add_argument("--salt", default="0")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("minimize", help="minimize a finding's trace")
    p.add_argument("--report", required=True, help="finding report file")
    p.add_argument("--spec")
    p.add_argument("--target", help="override the report's target")
    p.add_argument("--out", help="output trace file")
    p.set_defaults(func=_cmd_minimize)

    p = sub.add_parser("emit-poc", help="emit a compilable reproduction")
    p.add_argument("--report", required=True)
    p.add_argument("--trace", help="hex string or @file (default: min_trace.bin)")
    p.add_argument("--spec")
    p.add_argument("--out")
    p.add_argument("--check", action="store_true",
                   help="compile and run the emitted program")
    p.add_argument("--cc", default="cc -O1 -Wall -Wextra",
                   help="compiler command prefix")
    p.set_defaults(func=_cmd_emit_poc)

    p = sub.add_parser("coverage", help="security-check coverage of a campaign")
    p.add_argument("--out", default="campaign-out", help="campaign directory")
    p.set_defaults(func=_cmd_coverage)

    p = sub.add_parser("selftest", help="quick environment sanity checks")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SpecError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
