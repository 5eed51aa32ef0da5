"""Trace interpreter: applies decoded actions to an allocator target.

The engine owns two tool-side memory regions mapped at salt-derived
randomized addresses: the heap container (256 records of 16 bytes, written
right after every successful allocation) and the global buffer (one page of
attacker-controlled scratch).  Both are shadowed by the detector; the
engine synchronizes the shadows after its own legitimate writes only, so
any other change to these regions is allocator spillover and becomes an
impact event.
"""

from __future__ import annotations

import ctypes
import struct
from dataclasses import dataclass, field
from typing import Optional

from .codec import (
    Allocate,
    BufferWrite,
    BugInvoke,
    Deallocate,
    HeapWrite,
    TraceProgram,
    materialize,
)
from .detector import ImpactEvent, ImpactReport, ShadowState, final_verdict
from .model import BUFFER_SIZE, MASK64, WORD, BugKind, ModelSpec
from .target import AllocatorTarget, ChunkHandle

CONTAINER_SIZE = 4096  # 256 records x 16 bytes
RECORD_SIZE = 16

_PROT_RW = 0x3
_MAP_PRIVATE_ANON = 0x22
_MAP_FIXED_NOREPLACE = 0x100000
_MAP_FAILED = (1 << 64) - 1

_libc = ctypes.CDLL(None, use_errno=True)
_mmap = _libc.mmap
_mmap.restype = ctypes.c_void_p
_mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int,
                  ctypes.c_int, ctypes.c_int, ctypes.c_long]

_MIX = 0x9E3779B97F4A7C15


def _map_region(hint: int, size: int) -> int:
    addr = _mmap(hint, size, _PROT_RW,
                 _MAP_PRIVATE_ANON | _MAP_FIXED_NOREPLACE, -1, 0)
    if addr in (None, 0, _MAP_FAILED):
        addr = _mmap(None, size, _PROT_RW, _MAP_PRIVATE_ANON, -1, 0)
    if addr in (None, 0, _MAP_FAILED):
        raise MemoryError("cannot map tool region")
    return addr


def region_hints(salt: int) -> tuple[int, int]:
    """Two page-aligned placement hints derived from the replay salt."""
    mix = (salt * _MIX) & MASK64
    h1 = 0x500000000000 | ((mix & 0xFFFFF) << 12)
    h2 = 0x600000000000 | (((mix >> 20) & 0xFFFFF) << 12)
    return h1, h2


def _write_word(addr: int, value: int) -> None:
    ctypes.memmove(addr, struct.pack("<Q", value & MASK64), WORD)


def _write_byte(addr: int, value: int) -> None:
    ctypes.memmove(addr, bytes([value & 0xFF]), 1)


def _slot_offset(slot: int, usable: int) -> Optional[int]:
    """Word offset for slot 0..15, or None when outside the usable span."""
    if slot < 8:
        off = slot * WORD
        return off if off + WORD <= usable else None
    off = usable - (16 - slot) * WORD
    return off if off >= 0 else None


@dataclass
class ExecutionOutcome:
    status: str  # "finding" | "no-impact"
    report: Optional[ImpactReport]
    log: tuple[str, ...] = ()


class ExecutionEngine:
    """One engine per execution; never reuse across traces."""

    def __init__(self, target: AllocatorTarget, spec: ModelSpec,
                 salt: int) -> None:
        self.target = target
        self.spec = spec
        self.salt = salt
        h1, h2 = region_hints(salt)
        self.container_base = _map_region(h1, CONTAINER_SIZE)
        self.buffer_base = _map_region(h2, BUFFER_SIZE)
        self.records: list[ChunkHandle] = []
        self.committed_bug: Optional[BugKind] = None
        self.shadow = ShadowState(self.container_base, CONTAINER_SIZE,
                                  self.buffer_base, BUFFER_SIZE)
        self.log: list[str] = []
        self.events: list[ImpactEvent] = []

    # materialize() context protocol ------------------------------------

    @property
    def ctx(self):
        return self

    # --------------------------------------------------------------------

    def execute(self, program: TraceProgram) -> ExecutionOutcome:
        for i, action in enumerate(program.actions):
            alloc_dealloc = self._apply(i, action)
            ev = self.shadow.check_divergence(alloc_dealloc, i)
            if ev is not None:
                self.events.append(ev)
        report = final_verdict(
            self.events, self.spec,
            bug=self.committed_bug.value if self.committed_bug else "none",
            trace_hex=program.source.hex(),
            salt=self.salt,
            target=self.target.id,
        )
        status = "finding" if report is not None else "no-impact"
        return ExecutionOutcome(status, report, tuple(self.log))

    def _apply(self, i: int, action) -> bool:
        """Apply one action; returns whether it is allocation/deallocation
        family for the divergence rule."""
        if isinstance(action, Allocate):
            self._do_allocate(i, action)
            return True
        if isinstance(action, Deallocate):
            self._do_deallocate(i, action)
            return True
        if isinstance(action, HeapWrite):
            self._do_heap_write(i, action)
            return False
        if isinstance(action, BufferWrite):
            self._do_buffer_write(i, action)
            return False
        return self._do_bug(i, action)

    def _do_allocate(self, i: int, action: Allocate) -> None:
        size = materialize(action.size, self)
        addr = self.target.allocate(size)
        if addr == 0:
            self.log.append(f"{i} allocate size={size} failed")
            return
        usable = self.target.usable_size(addr, request=size)
        ev = self.shadow.check_allocation(addr, max(size, 1), i)
        if ev is not None:
            self.events.append(ev)
        idx = len(self.records)
        rec_off = idx * RECORD_SIZE
        ctypes.memmove(self.container_base + rec_off,
                       struct.pack("<QQ", addr & MASK64, size & MASK64),
                       RECORD_SIZE)
        self.shadow.sync_container(rec_off, RECORD_SIZE)
        self.shadow.record_chunk(addr, size)
        self.records.append(ChunkHandle(addr, size, usable))
        if usable < size:
            self.log.append(f"{i} allocate size={size} usable={usable} short")
        else:
            self.log.append(f"{i} allocate size={size} usable={usable}")

    def _do_deallocate(self, i: int, action: Deallocate) -> None:
        if not self.records:
            self.log.append(f"{i} deallocate skip empty")
            return
        idx = action.chunk % len(self.records)
        rec = self.records[idx]
        if not rec.live:
            self.log.append(f"{i} deallocate idx={idx} skip freed")
            return
        self.target.deallocate(rec.base)
        rec.live = False
        self.shadow.mark_freed(idx)
        self.log.append(f"{i} deallocate idx={idx}")

    def _do_heap_write(self, i: int, action: HeapWrite) -> None:
        if not self.records:
            self.log.append(f"{i} heap_write skip empty")
            return
        idx = action.chunk % len(self.records)
        rec = self.records[idx]
        if not rec.live:
            self.log.append(f"{i} heap_write idx={idx} skip freed")
            return
        off = _slot_offset(action.slot, rec.usable)
        if off is None:
            self.log.append(f"{i} heap_write idx={idx} slot={action.slot} skip span")
            return
        _write_word(rec.base + off, materialize(action.value, self))
        self.log.append(f"{i} heap_write idx={idx} slot={action.slot}")

    def _do_buffer_write(self, i: int, action: BufferWrite) -> None:
        _write_word(self.buffer_base + action.offset,
                    materialize(action.value, self))
        self.shadow.sync_buffer(action.offset, WORD)
        self.log.append(f"{i} buffer_write off={action.offset}")

    def _select(self, want_live: bool, raw: int) -> Optional[int]:
        pool = [k for k, r in enumerate(self.records) if r.live == want_live]
        if not pool:
            return None
        return pool[raw % len(pool)]

    def _do_bug(self, i: int, action: BugInvoke) -> bool:
        """Returns True when the executed bug is deallocation-family."""
        bug = action.bug
        if self.committed_bug is not None and self.committed_bug is not bug:
            self.log.append(f"{i} bug {bug.value} skip committed")
            return False

        if bug in (BugKind.OF, BugKind.O1, BugKind.O1N):
            idx = self._select(True, action.chunk)
            if idx is None:
                self.log.append(f"{i} bug {bug.value} skip no live chunk")
                return False
            rec = self.records[idx]
            self.committed_bug = bug
            end = rec.base + rec.usable
            if bug is BugKind.OF:
                word = materialize(action.value, self)
                for j in range(action.count):
                    _write_word(end + j * WORD, word)
                self.log.append(f"{i} bug OF idx={idx} k={action.count}")
            elif bug is BugKind.O1:
                _write_byte(end, materialize(action.value, self))
                self.log.append(f"{i} bug O1 idx={idx}")
            else:
                _write_byte(end, 0)
                self.log.append(f"{i} bug O1N idx={idx}")
            return False

        if bug is BugKind.WF:
            idx = self._select(False, action.chunk)
            if idx is None:
                self.log.append(f"{i} bug WF skip no freed chunk")
                return False
            rec = self.records[idx]
            off = _slot_offset(action.slot, rec.usable)
            if off is None:
                self.log.append(f"{i} bug WF idx={idx} slot={action.slot} skip span")
                return False
            self.committed_bug = bug
            _write_word(rec.base + off, materialize(action.value, self))
            self.log.append(f"{i} bug WF idx={idx} slot={action.slot}")
            return False

        if bug is BugKind.FF:
            idx = self._select(False, action.chunk)
            if idx is None:
                self.log.append(f"{i} bug FF skip no freed chunk")
                return False
            self.committed_bug = bug
            self.target.deallocate(self.records[idx].base)
            self.log.append(f"{i} bug FF idx={idx}")
            return True

        # AF: free an attacker-chosen address
        self.committed_bug = bug
        addr = materialize(action.value, self)
        self.target.deallocate(addr)
        self.log.append(f"{i} bug AF")
        return True


def execute_trace(program: TraceProgram, target: AllocatorTarget,
                  spec: ModelSpec, salt: int) -> ExecutionOutcome:
    return ExecutionEngine(target, spec, salt).execute(program)
