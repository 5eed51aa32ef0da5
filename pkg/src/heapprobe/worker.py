"""Worker process entry point: executes one trace per fresh process.

Two modes share one protocol:

* one-shot: decode and execute a single trace, write the report file, exit
  with a dedicated code (10 finding, 11 no impact; death by signal means
  the allocator crashed; anything else is a harness error).

* serve: load the spec and target once, then fork one child per `RUN`
  request read from stdin.  Forked children see copy-on-write allocator
  state exactly as freshly loaded, because the server itself never calls
  the target.  Responses go to stdout as `DONE <status>` lines.
"""

from __future__ import annotations

import argparse
import os
import signal
import sys
import time

EXIT_FINDING = 10
EXIT_NO_IMPACT = 11


def _load_spec(path):
    from .model import ModelSpec

    if path:
        with open(path) as fh:
            return ModelSpec.parse(fh.read())
    return ModelSpec.default()


def _run_one(target, spec, trace: bytes, salt: int, report_path: str,
             signal_on_finding: int = 0) -> int:
    from .codec import decode
    from .engine import execute_trace

    program = decode(trace, spec)
    outcome = execute_trace(program, target, spec, salt)
    with open(report_path, "w") as fh:
        fh.write(f"status {outcome.status}\n")
        if outcome.report is not None:
            fh.write(outcome.report.serialize())
        for line in outcome.log:
            fh.write(f"log {line}\n")
    if outcome.status == "finding" and signal_on_finding:
        os.kill(os.getpid(), signal_on_finding)
    return EXIT_FINDING if outcome.status == "finding" else EXIT_NO_IMPACT


def _serve(target, spec, signal_on_finding: int) -> int:
    """Fork-server loop; one forked child per request."""
    stdin = sys.stdin
    stdout = sys.stdout
    while True:
        line = stdin.readline()
        if not line:
            return 0
        parts = line.split()
        if not parts or parts[0] == "EXIT":
            return 0
        if parts[0] != "RUN" or len(parts) != 6:
            stdout.write("DONE error:protocol\n")
            stdout.flush()
            continue
        _, trace_hex, salt_hex, timeout_ms, report_path, stderr_path = parts
        trace = bytes.fromhex(trace_hex) if trace_hex != "-" else b""
        salt = int(salt_hex, 16)
        deadline = time.monotonic() + int(timeout_ms) / 1000.0

        pid = os.fork()
        if pid == 0:
            try:
                fd = os.open(stderr_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC,
                             0o600)
                os.dup2(fd, 2)
                os.close(fd)
                code = _run_one(target, spec, trace, salt, report_path,
                                signal_on_finding)
            except BaseException:
                import traceback

                traceback.print_exc(file=sys.stderr)
                sys.stderr.flush()
                code = 1
            os._exit(code)

        status = _await_child(pid, deadline)
        stdout.write(f"DONE {status}\n")
        stdout.flush()


def _await_child(pid: int, deadline: float) -> str:
    while True:
        done, wstatus = os.waitpid(pid, os.WNOHANG)
        if done == pid:
            if os.WIFSIGNALED(wstatus):
                return f"crash:{os.WTERMSIG(wstatus)}"
            code = os.WEXITSTATUS(wstatus)
            if code == EXIT_FINDING:
                return "finding"
            if code == EXIT_NO_IMPACT:
                return "no-impact"
            return f"error:{code}"
        if time.monotonic() > deadline:
            os.kill(pid, signal.SIGKILL)
            os.waitpid(pid, 0)
            return "timeout"
        time.sleep(0.002)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="heapprobe-worker")
    parser.add_argument("--target", required=True)
    parser.add_argument("--spec-file")
    parser.add_argument("--trace-hex")
    parser.add_argument("--salt", default="0")
    parser.add_argument("--report")
    parser.add_argument("--serve", action="store_true")
    parser.add_argument("--signal-on-finding", type=int, default=0)
    args = parser.parse_args(argv)

    from .target import AllocatorTarget

    spec = _load_spec(args.spec_file)
    target = AllocatorTarget.from_descriptor(args.target)

    if args.serve:
        return _serve(target, spec, args.signal_on_finding)

    if args.report is None or args.trace_hex is None:
        parser.error("--trace-hex and --report are required without --serve")
    trace = bytes.fromhex(args.trace_hex) if args.trace_hex != "-" else b""
    return _run_one(target, spec, trace, int(args.salt, 16), args.report,
                    args.signal_on_finding)


if __name__ == "__main__":
    sys.exit(main())
