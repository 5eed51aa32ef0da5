"""Byte codec: deterministic decoding of raw bytes into trace programs.

The codec is byte-granular and total: any byte string decodes, truncated
trailing actions are dropped, and decode(encode(p)) == p for every program
obtained from decode.  Value parameters stay symbolic (strategy + raw
selector bytes); concrete words are produced by `materialize` at execution
time against a live context.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

from .model import (
    BUFFER_SIZE,
    GROUP_BOUNDS,
    I1_CONSTANTS,
    INTEGER_STRATEGIES,
    MASK64,
    MAX_ACTIONS,
    POINTER_STRATEGIES,
    TRANSFORM_A,
    WORD,
    ActionKind,
    BugKind,
    Knowledge,
    ModelSpec,
    Strategy,
)

# Strategies that carry a transform block in the byte stream.  Integer-typed
# ones among them admit linear transforms; address-typed ones only shifts.
TRANSFORMABLE = frozenset(
    {Strategy.I2, Strategy.I4, Strategy.I5, Strategy.P2, Strategy.P3, Strategy.P4}
)
LINEAR_CAPABLE = frozenset({Strategy.I4, Strategy.I5})


class CodecError(ValueError):
    """An action cannot be represented under the given spec."""


@dataclass(frozen=True)
class Transform:
    mode: str = "none"  # "none" | "linear" | "shift"
    a: int = 1          # multiplier, one of TRANSFORM_A
    b: int = 0          # additive byte offset, signed multiple of WORD

    def apply(self, value: int) -> int:
        if self.mode == "linear":
            return (self.a * value + self.b) & MASK64
        if self.mode == "shift":
            return (value + self.b) & MASK64
        return value & MASK64


IDENTITY = Transform()


@dataclass(frozen=True)
class ValueSpec:
    """A symbolic value: strategy selector plus raw parameter bytes."""

    strategy: Strategy
    const_index: int = 0                                   # I1, resolved 0..15
    pair: Optional[tuple[Knowledge, Knowledge]] = None     # I2
    group_byte: int = 0                                    # I3, raw byte
    offset: int = 0                                        # I3, raw 16-bit
    chunk: int = 0                                         # I4/I5, raw byte
    transform: Transform = IDENTITY

    @property
    def is_pointer(self) -> bool:
        return self.strategy in POINTER_STRATEGIES


@dataclass(frozen=True)
class Allocate:
    kind = ActionKind.ALLOCATE
    size: ValueSpec


@dataclass(frozen=True)
class Deallocate:
    kind = ActionKind.DEALLOCATE
    chunk: int  # raw byte; modulo record count at execution time


@dataclass(frozen=True)
class HeapWrite:
    kind = ActionKind.HEAP_WRITE
    chunk: int
    slot: int  # 0..15
    value: ValueSpec


@dataclass(frozen=True)
class BufferWrite:
    kind = ActionKind.BUFFER_WRITE
    offset: int  # word-aligned, < BUFFER_SIZE - WORD
    value: ValueSpec


@dataclass(frozen=True)
class BugInvoke:
    kind = ActionKind.BUG_INVOKE
    bug: BugKind
    chunk: int = 0                     # OF/WF/FF/O1/O1N
    slot: int = 0                      # WF
    count: int = 1                     # OF, 1..8 words
    value: Optional[ValueSpec] = None  # OF/WF/AF/O1


Action = Union[Allocate, Deallocate, HeapWrite, BufferWrite, BugInvoke]


@dataclass(frozen=True)
class TraceProgram:
    actions: tuple[Action, ...]
    source: bytes = b""


class _Truncated(Exception):
    pass


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def byte(self) -> int:
        if self.pos >= len(self.data):
            raise _Truncated
        b = self.data[self.pos]
        self.pos += 1
        return b

    def u16(self) -> int:
        lo = self.byte()
        hi = self.byte()
        return lo | (hi << 8)

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.data)


def _signed(b: int) -> int:
    return b - 256 if b >= 128 else b


def _decode_transform(r: _Reader, strategy: Strategy) -> Transform:
    if strategy not in TRANSFORMABLE:
        return IDENTITY
    nmodes = 3 if strategy in LINEAR_CAPABLE else 2
    mode = r.byte() % nmodes
    if mode == 0:
        return IDENTITY
    if nmodes == 3 and mode == 1:
        a = TRANSFORM_A[r.byte() % len(TRANSFORM_A)]
        b = _signed(r.byte()) * WORD
        return Transform("linear", a, b)
    return Transform("shift", 1, _signed(r.byte()) * WORD)


def _decode_value(r: _Reader, spec: ModelSpec, pool: tuple[Strategy, ...]) -> ValueSpec:
    if not pool:
        raise CodecError("no value strategy enabled for this position")
    strategy = pool[r.byte() % len(pool)]
    if strategy is Strategy.I1:
        return ValueSpec(strategy, const_index=r.byte() % len(I1_CONSTANTS))
    if strategy is Strategy.I2:
        pairs = spec.i2_pairs
        pair = pairs[r.byte() % len(pairs)]
        return ValueSpec(strategy, pair=pair, transform=_decode_transform(r, strategy))
    if strategy is Strategy.I3:
        group_byte = r.byte()
        offset = r.u16()
        return ValueSpec(strategy, group_byte=group_byte, offset=offset)
    if strategy in (Strategy.I4, Strategy.I5):
        chunk = r.byte()
        return ValueSpec(strategy, chunk=chunk, transform=_decode_transform(r, strategy))
    if strategy is Strategy.P1:
        return ValueSpec(strategy)
    # P2 / P3 / P4: no parameter bytes, just the transform block
    return ValueSpec(strategy, transform=_decode_transform(r, strategy))


def _int_pool(spec: ModelSpec) -> tuple[Strategy, ...]:
    return tuple(s for s in spec.enabled_strategies if s in INTEGER_STRATEGIES)


def _ptr_pool(spec: ModelSpec) -> tuple[Strategy, ...]:
    return tuple(s for s in spec.enabled_strategies if s in POINTER_STRATEGIES)


def _decode_action(r: _Reader, spec: ModelSpec) -> Action:
    enabled = spec.enabled_actions
    kind = enabled[r.byte() % len(enabled)]
    if kind is ActionKind.ALLOCATE:
        return Allocate(size=_decode_value(r, spec, _int_pool(spec)))
    if kind is ActionKind.DEALLOCATE:
        return Deallocate(chunk=r.byte())
    if kind is ActionKind.HEAP_WRITE:
        chunk = r.byte()
        slot = r.byte() % 16
        return HeapWrite(chunk=chunk, slot=slot,
                         value=_decode_value(r, spec, spec.enabled_strategies))
    if kind is ActionKind.BUFFER_WRITE:
        offset = (r.u16() % (BUFFER_SIZE - WORD)) & ~(WORD - 1)
        return BufferWrite(offset=offset,
                           value=_decode_value(r, spec, spec.enabled_strategies))
    # bug invocation
    bugs = spec.enabled_bugs
    bug = bugs[r.byte() % len(bugs)]
    if bug is BugKind.OF:
        chunk = r.byte()
        count = 1 + r.byte() % 8
        return BugInvoke(bug=bug, chunk=chunk, count=count,
                         value=_decode_value(r, spec, spec.enabled_strategies))
    if bug is BugKind.WF:
        chunk = r.byte()
        slot = r.byte() % 16
        return BugInvoke(bug=bug, chunk=chunk, slot=slot,
                         value=_decode_value(r, spec, spec.enabled_strategies))
    if bug is BugKind.AF:
        return BugInvoke(bug=bug, value=_decode_value(r, spec, _ptr_pool(spec)))
    if bug is BugKind.FF:
        return BugInvoke(bug=bug, chunk=r.byte())
    if bug is BugKind.O1:
        chunk = r.byte()
        return BugInvoke(bug=bug, chunk=chunk,
                         value=_decode_value(r, spec, spec.enabled_strategies))
    return BugInvoke(bug=bug, chunk=r.byte())  # O1N


def decode(data: bytes, spec: Optional[ModelSpec] = None) -> TraceProgram:
    """Decode bytes into a program; a truncated trailing action is dropped."""
    spec = spec or ModelSpec.default()
    r = _Reader(bytes(data))
    actions: list[Action] = []
    while not r.exhausted and len(actions) < MAX_ACTIONS:
        mark = r.pos
        try:
            actions.append(_decode_action(r, spec))
        except _Truncated:
            r.pos = mark
            break
    return TraceProgram(tuple(actions), bytes(data))


class _Writer:
    def __init__(self) -> None:
        self.out = bytearray()

    def byte(self, b: int) -> None:
        self.out.append(b & 0xFF)

    def u16(self, v: int) -> None:
        self.byte(v & 0xFF)
        self.byte((v >> 8) & 0xFF)


def _encode_transform(w: _Writer, t: Transform, strategy: Strategy) -> None:
    if strategy not in TRANSFORMABLE:
        if t.mode != "none":
            raise CodecError(f"strategy {strategy.value} cannot carry a transform")
        return
    linear_ok = strategy in LINEAR_CAPABLE
    if t.mode == "none":
        w.byte(0)
        return
    if t.mode == "linear":
        if not linear_ok:
            raise CodecError(f"linear transform invalid for {strategy.value}")
        w.byte(1)
        w.byte(TRANSFORM_A.index(t.a))
        w.byte((t.b // WORD) & 0xFF)
        return
    if t.mode == "shift":
        w.byte(2 if linear_ok else 1)
        w.byte((t.b // WORD) & 0xFF)
        return
    raise CodecError(f"unknown transform mode {t.mode!r}")


def _encode_value(w: _Writer, v: ValueSpec, spec: ModelSpec,
                  pool: tuple[Strategy, ...]) -> None:
    if v.strategy not in pool:
        raise CodecError(f"strategy {v.strategy.value} disabled or invalid here")
    w.byte(pool.index(v.strategy))
    s = v.strategy
    if s is Strategy.I1:
        w.byte(v.const_index)
    elif s is Strategy.I2:
        pairs = spec.i2_pairs
        if v.pair not in pairs:
            raise CodecError(f"address pair {v.pair} not available")
        w.byte(pairs.index(v.pair))
    elif s is Strategy.I3:
        w.byte(v.group_byte)
        w.u16(v.offset)
    elif s in (Strategy.I4, Strategy.I5):
        w.byte(v.chunk)
    # _encode_transform writes nothing for non-transformable strategies but
    # still rejects a hand-built value that smuggles a transform onto one
    _encode_transform(w, v.transform, s)


def encode(program: TraceProgram, spec: Optional[ModelSpec] = None) -> bytes:
    """Inverse of decode on decoded programs; errors name the action index."""
    spec = spec or ModelSpec.default()
    enabled = spec.enabled_actions
    w = _Writer()
    for i, action in enumerate(program.actions):
        try:
            if action.kind not in enabled:
                raise CodecError(f"action kind {action.kind.value} disabled")
            w.byte(enabled.index(action.kind))
            if isinstance(action, Allocate):
                _encode_value(w, action.size, spec, _int_pool(spec))
            elif isinstance(action, Deallocate):
                w.byte(action.chunk)
            elif isinstance(action, HeapWrite):
                w.byte(action.chunk)
                w.byte(action.slot)
                _encode_value(w, action.value, spec, spec.enabled_strategies)
            elif isinstance(action, BufferWrite):
                w.u16(action.offset)
                _encode_value(w, action.value, spec, spec.enabled_strategies)
            elif isinstance(action, BugInvoke):
                bugs = spec.enabled_bugs
                if action.bug not in bugs:
                    raise CodecError(f"bug {action.bug.value} disabled")
                w.byte(bugs.index(action.bug))
                if action.bug is BugKind.OF:
                    w.byte(action.chunk)
                    w.byte(action.count - 1)
                    _encode_value(w, action.value, spec, spec.enabled_strategies)
                elif action.bug is BugKind.WF:
                    w.byte(action.chunk)
                    w.byte(action.slot)
                    _encode_value(w, action.value, spec, spec.enabled_strategies)
                elif action.bug is BugKind.AF:
                    _encode_value(w, action.value, spec, _ptr_pool(spec))
                else:  # FF / O1 / O1N
                    w.byte(action.chunk)
                    if action.bug is BugKind.O1:
                        _encode_value(w, action.value, spec,
                                      spec.enabled_strategies)
            else:
                raise CodecError(f"unknown action type {type(action).__name__}")
        except CodecError as e:
            raise CodecError(f"action {i}: {e}") from None
    return bytes(w.out)


def materialize(value: ValueSpec, ctx) -> int:
    """Turn a symbolic value into a concrete 64-bit word.

    `ctx` supplies `records` (objects with .base/.request/.usable), plus
    `buffer_base` and `container_base`.  Strategies needing absent state
    (empty record list) fall back to 0.
    """
    s = value.strategy
    records = ctx.records
    if s is Strategy.I1:
        return I1_CONSTANTS[value.const_index] & MASK64
    if s is Strategy.I3:
        spec: ModelSpec = ctx.spec
        if spec.sizes:
            return spec.sizes[value.group_byte % len(spec.sizes)] & MASK64
        groups = spec.size_groups
        g = groups[value.group_byte % len(groups)]
        lo, hi = GROUP_BOUNDS[g], GROUP_BOUNDS[g + 1]
        return (lo + value.offset % (hi - lo)) & MASK64
    if s in (Strategy.I4, Strategy.I5):
        if not records:
            return 0
        rec = records[value.chunk % len(records)]
        base = rec.request if s is Strategy.I4 else rec.usable
        return value.transform.apply(base)
    if s is Strategy.P1:
        return 0

    def role_addr(role: Knowledge) -> int:
        if role is Knowledge.BA:
            return ctx.buffer_base
        if role is Knowledge.CA:
            return ctx.container_base
        return records[-1].base if records else 0

    if s is Strategy.I2:
        a, b = value.pair
        raw = (role_addr(a) - role_addr(b)) & MASK64
        return value.transform.apply(raw) & ~(WORD - 1) & MASK64
    if s is Strategy.P2:
        raw = ctx.buffer_base
    elif s is Strategy.P3:
        if not records:
            return 0
        raw = records[-1].base
    else:  # P4
        raw = ctx.container_base
    return value.transform.apply(raw) & ~(WORD - 1) & MASK64
