"""Delta-debugging trace minimization.

Single-action removal: walk the action list, drop one action, re-execute
the candidate in a fresh process, and keep the removal iff the primary
(impact, site) pair is unchanged.  Passes repeat to a fixpoint (capped)
because one removal frequently unlocks others.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

from .codec import TraceProgram, encode
from .model import ModelSpec
from .runner import ForkServerRunner, Outcome

MAX_PASSES = 8


class FlakyFindingError(RuntimeError):
    """The original trace no longer reproduces its recorded impact."""


@dataclass
class MinimizationJob:
    program: TraceProgram
    target_desc: str
    spec: ModelSpec
    salt: int
    reference: tuple[str, str]  # (impact class, site)


def get_impact(runner, program: TraceProgram,
               spec: ModelSpec, salt: int) -> Union[tuple[str, str], str]:
    """Primary (impact, site) of one fresh execution, or the outcome kind."""
    outcome: Outcome = runner.run(encode(program, spec), salt)
    if outcome.status == "finding" and outcome.report is not None:
        return (outcome.report.impact, outcome.report.site)
    return outcome.status


def minimize(job: MinimizationJob, runner=None) -> TraceProgram:
    """Returns a reproducing subsequence of the original actions."""
    own_runner = runner is None
    if own_runner:
        runner = ForkServerRunner(job.target_desc, job.spec)
    try:
        return _minimize(job, runner)
    finally:
        if own_runner:
            runner.close()


def _minimize(job: MinimizationJob, runner) -> TraceProgram:
    spec, salt = job.spec, job.salt
    if get_impact(runner, job.program, spec, salt) != job.reference:
        raise FlakyFindingError(
            f"original trace does not reproduce {job.reference}")

    actions = list(job.program.actions)
    for _ in range(MAX_PASSES):
        changed = False
        i = 0
        while i < len(actions):
            candidate = TraceProgram(tuple(actions[:i] + actions[i + 1:]))
            if get_impact(runner, candidate, spec, salt) == job.reference:
                del actions[i]
                changed = True
            else:
                i += 1
        if not changed:
            break

    result = TraceProgram(tuple(actions), encode(TraceProgram(tuple(actions)),
                                                 spec))
    if get_impact(runner, result, spec, salt) != job.reference:
        raise FlakyFindingError("minimized trace failed re-validation")
    return result
