"""Impact detection through overlap checks and shadow-memory divergence.

The detector owns byte-exact replicas (shadows) of the heap container
region and the global buffer, plus immutable (address, size) replicas of
every allocation.  The execution engine synchronizes the shadows after
each legitimate mutation; any remaining difference must have been written
by the allocator itself and is classified as an impact.
"""

from __future__ import annotations

import ctypes
from dataclasses import dataclass, field
from typing import Callable, Optional

from .model import (
    CODEC_VERSION,
    SEVERITY,
    ImpactClass,
    ModelSpec,
    Site,
)


def _default_reader(addr: int, size: int) -> bytes:
    return ctypes.string_at(addr, size)


@dataclass(frozen=True)
class ImpactEvent:
    impact: ImpactClass
    site: Optional[Site]  # None for AC/OC (allocation-time verdicts)
    action_index: int


@dataclass
class ChunkReplica:
    """Snapshot of an allocation, taken right after malloc; never mutated.

    `live` tracks legitimate frees so overlap checks ignore reuse of
    properly freed chunks; the address/size snapshot itself is immutable.
    """

    base: int
    size: int
    live: bool = True

    @property
    def end(self) -> int:
        return self.base + self.size


def _intersects(a0: int, a1: int, b0: int, b1: int) -> bool:
    return a0 < b1 and b0 < a1


class ShadowState:
    def __init__(self, container_base: int, container_size: int,
                 buffer_base: int, buffer_size: int,
                 reader: Callable[[int, int], bytes] = _default_reader) -> None:
        self.container_base = container_base
        self.container_size = container_size
        self.buffer_base = buffer_base
        self.buffer_size = buffer_size
        self._read = reader
        self.container_shadow = bytearray(self._read(container_base, container_size))
        self.buffer_shadow = bytearray(self._read(buffer_base, buffer_size))
        self.replicas: list[ChunkReplica] = []

    # -- synchronization hooks called by the engine on legitimate writes --

    def sync_container(self, offset: int, length: int) -> None:
        self.container_shadow[offset:offset + length] = self._read(
            self.container_base + offset, length)

    def sync_buffer(self, offset: int, length: int) -> None:
        self.buffer_shadow[offset:offset + length] = self._read(
            self.buffer_base + offset, length)

    def record_chunk(self, base: int, size: int) -> None:
        self.replicas.append(ChunkReplica(base, max(size, 1)))

    def mark_freed(self, index: int) -> None:
        self.replicas[index].live = False

    # -- verdicts --

    def check_allocation(self, base: int, size: int,
                         action_index: int) -> Optional[ImpactEvent]:
        """AC if the new chunk lands in the container or buffer region,
        else OC if it overlaps a live chunk replica."""
        lo, hi = base, base + max(size, 1)
        if (_intersects(lo, hi, self.container_base,
                        self.container_base + self.container_size)
                or _intersects(lo, hi, self.buffer_base,
                               self.buffer_base + self.buffer_size)):
            return ImpactEvent(ImpactClass.AC, None, action_index)
        for rep in self.replicas:
            if rep.live and _intersects(lo, hi, rep.base, rep.end):
                return ImpactEvent(ImpactClass.OC, None, action_index)
        return None

    def check_divergence(self, alloc_dealloc: bool,
                         action_index: int) -> Optional[ImpactEvent]:
        """Compare both regions against their shadows; divergence during an
        allocation or deallocation is RW, during anything else AW.  The
        shadow is then resynchronized so one corruption reports once."""
        site: Optional[Site] = None
        cur_container = self._read(self.container_base, self.container_size)
        if cur_container != bytes(self.container_shadow):
            site = Site.CONTAINER
            self.container_shadow[:] = cur_container
        cur_buffer = self._read(self.buffer_base, self.buffer_size)
        if cur_buffer != bytes(self.buffer_shadow):
            if site is None:
                site = Site.BUFFER
            self.buffer_shadow[:] = cur_buffer
        if site is None:
            return None
        impact = ImpactClass.RW if alloc_dealloc else ImpactClass.AW
        return ImpactEvent(impact, site, action_index)


@dataclass
class ImpactReport:
    impact: str         # primary class value, e.g. "AW"
    site: str           # "container" | "buffer" | "-"
    action_index: int
    bug: str            # committed bug kind or "none"
    trace_hex: str
    salt: int
    target: str
    codec_version: str = CODEC_VERSION
    events: tuple = ()  # (impact, site, action_index) string triples

    def serialize(self) -> str:
        lines = [
            f"impact {self.impact}",
            f"site {self.site}",
            f"action_index {self.action_index}",
            f"bug {self.bug}",
            f"trace_hex {self.trace_hex}",
            f"salt {self.salt:#x}",
            f"target {self.target}",
            f"codec_version {self.codec_version}",
        ]
        for imp, site, idx in self.events:
            lines.append(f"event {imp} {site} {idx}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "ImpactReport":
        fields: dict = {"events": []}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, rest = line.partition(" ")
            if key == "event":
                imp, site, idx = rest.split()
                fields["events"].append((imp, site, int(idx)))
            elif key in ("impact", "site", "bug", "trace_hex", "target",
                         "codec_version"):
                fields[key] = rest
            elif key == "action_index":
                fields["action_index"] = int(rest)
            elif key == "salt":
                fields["salt"] = int(rest, 16)
        fields["events"] = tuple(fields["events"])
        return cls(**fields)


def final_verdict(events: list[ImpactEvent], spec: ModelSpec, *,
                  bug: str, trace_hex: str, salt: int,
                  target: str) -> Optional[ImpactReport]:
    """Fold impact events into a report; None when nothing (allowed) happened.

    The primary impact is the most severe class observed (AC > AW > OC > RW);
    ties go to the earliest event of that class.  The spec's impact set
    filters reporting only.
    """
    allowed = [e for e in events if e.impact in spec.impacts]
    if not allowed:
        return None
    primary = min(allowed, key=lambda e: (SEVERITY.index(e.impact), e.action_index))
    return ImpactReport(
        impact=primary.impact.value,
        site=primary.site.value if primary.site else "-",
        action_index=primary.action_index,
        bug=bug,
        trace_hex=trace_hex,
        salt=salt,
        target=target,
        events=tuple((e.impact.value, e.site.value if e.site else "-",
                      e.action_index) for e in allowed),
    )
