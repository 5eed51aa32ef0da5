"""Hand-built trace programs and small utilities shared by the tests."""

from __future__ import annotations

from itertools import combinations
from types import SimpleNamespace

from heapprobe.codec import (
    Allocate,
    BugInvoke,
    BufferWrite,
    Deallocate,
    HeapWrite,
    TraceProgram,
    Transform,
    ValueSpec,
    encode,
)
from heapprobe.minimize import get_impact
from heapprobe.model import (
    GROUP_BOUNDS,
    I1_CONSTANTS,
    BugKind,
    ModelSpec,
    Strategy,
)


def val_size(n: int) -> ValueSpec:
    """Size value that materializes to exactly n under the default groups."""
    for g in range(len(GROUP_BOUNDS) - 1):
        lo, hi = GROUP_BOUNDS[g], GROUP_BOUNDS[g + 1]
        if lo <= n < hi:
            return ValueSpec(Strategy.I3, group_byte=g, offset=n - lo)
    raise ValueError(f"size {n} outside group bounds")


def val_i1(value: int) -> ValueSpec:
    return ValueSpec(Strategy.I1, const_index=I1_CONSTANTS.index(value))


def noop_buffer_write() -> BufferWrite:
    """Marker action: independent of any heap state, removable everywhere."""
    return BufferWrite(offset=4080, value=val_i1(1))


def unlink_program() -> TraceProgram:
    """Unsafe-unlink attack against the bundled dlmalloc-style allocator.

    Three adjacent doubly-list-sized chunks; craft fd/bk in the first so
    that the back-consolidating free of the second unlinks it and writes a
    chosen word into the tool's container region (RW in container).
    Chunk header layout: prev_size@0, size@8, fd@16, bk@24; payload@16.
    """
    p4 = lambda b: ValueSpec(Strategy.P4, transform=Transform("shift", 1, b))
    usable_plus_8 = lambda idx: ValueSpec(
        Strategy.I5, chunk=idx, transform=Transform("linear", 1, 8))
    return TraceProgram((
        Allocate(size=val_size(200)),                      # 0: A
        Allocate(size=val_size(200)),                      # 1: B
        Allocate(size=val_size(200)),                      # 2: C (guard)
        HeapWrite(chunk=0, slot=0, value=p4(-24)),         # 3: A.fd
        HeapWrite(chunk=0, slot=1, value=p4(-16)),         # 4: A.bk
        HeapWrite(chunk=0, slot=15, value=usable_plus_8(0)),  # 5: B.prev_size
        BugInvoke(bug=BugKind.OF, chunk=0, count=1,
                  value=usable_plus_8(1)),                 # 6: B.size, !prev
        Deallocate(chunk=1),                               # 7: trigger unlink
    ))


def fastdup_program() -> TraceProgram:
    """Fast-bin-dup analogue: double free, then two allocations of the same
    chunk -> overlapping chunk (OC) on the second one."""
    return TraceProgram((
        Allocate(size=val_size(24)),   # 0
        Deallocate(chunk=0),           # 1
        BugInvoke(bug=BugKind.FF, chunk=0),  # 2
        Allocate(size=val_size(24)),   # 3
        Allocate(size=val_size(24)),   # 4 -> OC
    ))


def make_ctx(records=(), buffer_base=0x7000, container_base=0x9000,
             spec=None):
    """Minimal materialize() context."""
    return SimpleNamespace(
        records=list(records),
        buffer_base=buffer_base,
        container_base=container_base,
        spec=spec or ModelSpec.default(),
    )


def rec(base, request, usable=None):
    return SimpleNamespace(base=base, request=request,
                           usable=request if usable is None else usable)


def is_subsequence(sub, full) -> bool:
    it = iter(full)
    return all(any(a == b for b in it) for a in sub)


def exhaustive_optimal(runner, program: TraceProgram, spec: ModelSpec,
                       salt: int, reference, limit: int | None = None) -> int:
    """Length of the shortest reproducing subsequence, by ascending-size
    exhaustive search.  `limit` stops the search early (smallest size not
    yet ruled out is returned if nothing below `limit` reproduces)."""
    actions = program.actions
    top = len(actions) if limit is None else min(limit, len(actions))
    for size in range(1, top + 1):
        for keep in combinations(range(len(actions)), size):
            cand = TraceProgram(tuple(actions[i] for i in keep))
            if get_impact(runner, cand, spec, salt) == reference:
                return size
    return top + 1


def roundtrip(program: TraceProgram, spec: ModelSpec) -> TraceProgram:
    from heapprobe.codec import decode
    return decode(encode(program, spec), spec)
