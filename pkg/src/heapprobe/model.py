"""Core domain model: action, bug, and impact taxonomies plus campaign specs.

Everything here is plain data. The canonical orderings defined at module
level are normative for the byte codec and must never be reordered.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


WORD = 8
BUFFER_SIZE = 4096
MAX_ACTIONS = 256
CODEC_VERSION = "1"


class ActionKind(enum.Enum):
    ALLOCATE = "allocate"
    DEALLOCATE = "deallocate"
    HEAP_WRITE = "heap_write"
    BUFFER_WRITE = "buffer_write"
    BUG_INVOKE = "bug_invoke"


class BugKind(enum.Enum):
    OF = "OF"    # overflow past the usable end
    WF = "WF"    # write after free
    AF = "AF"    # free of an arbitrary address
    FF = "FF"    # double free
    O1 = "O1"    # off by one
    O1N = "O1N"  # off by one, NUL byte


class ImpactClass(enum.Enum):
    AC = "AC"  # arbitrary chunk
    OC = "OC"  # overlapping chunk
    AW = "AW"  # arbitrary write
    RW = "RW"  # restricted write


class Site(enum.Enum):
    CONTAINER = "container"
    BUFFER = "buffer"


class Knowledge(enum.Enum):
    HA = "HA"  # a heap address
    BA = "BA"  # the global buffer address
    CA = "CA"  # the container address


class Strategy(enum.Enum):
    I1 = "I1"  # pre-defined constant
    I2 = "I2"  # difference of two known addresses
    I3 = "I3"  # size sampled from a size group
    I4 = "I4"  # recorded request size of a chunk
    I5 = "I5"  # usable size of a chunk
    P1 = "P1"  # NULL
    P2 = "P2"  # buffer address
    P3 = "P3"  # heap address
    P4 = "P4"  # container address


ACTION_ORDER = (
    ActionKind.ALLOCATE,
    ActionKind.DEALLOCATE,
    ActionKind.HEAP_WRITE,
    ActionKind.BUFFER_WRITE,
    ActionKind.BUG_INVOKE,
)
BUG_ORDER = (BugKind.OF, BugKind.WF, BugKind.AF, BugKind.FF, BugKind.O1, BugKind.O1N)
IMPACT_ORDER = (ImpactClass.AC, ImpactClass.OC, ImpactClass.AW, ImpactClass.RW)
STRATEGY_ORDER = (
    Strategy.I1, Strategy.I2, Strategy.I3, Strategy.I4, Strategy.I5,
    Strategy.P1, Strategy.P2, Strategy.P3, Strategy.P4,
)
KNOWLEDGE_ORDER = (Knowledge.HA, Knowledge.BA, Knowledge.CA)

# Severity used to pick a report's primary impact.
SEVERITY = (ImpactClass.AC, ImpactClass.AW, ImpactClass.OC, ImpactClass.RW)

INTEGER_STRATEGIES = frozenset(
    {Strategy.I1, Strategy.I2, Strategy.I3, Strategy.I4, Strategy.I5}
)
POINTER_STRATEGIES = frozenset(
    {Strategy.P1, Strategy.P2, Strategy.P3, Strategy.P4}
)

# Size groups: half-open intervals partitioning [1, 2**20]; the last group
# is the single top boundary value.
GROUP_BOUNDS = (1, 32, 1024, 32768, 1 << 20, (1 << 20) + 1)
NUM_GROUPS = 5

I1_CONSTANTS = (
    0, 1, 8, 16, 24, 32, 64, 127, 128, 255, 256, 4096,
    1 << 16, (1 << 20) - 1, (1 << 64) - 1, (1 << 64) - 8,
)

TRANSFORM_A = (1, 2, 3, 4, 8)

MASK64 = (1 << 64) - 1


class SpecError(ValueError):
    """A model spec file is malformed."""


def _parse_values(enum_cls, order, raw: str, key: str):
    if raw.strip() == "*":
        return tuple(order)
    out = []
    for tok in raw.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            val = enum_cls(tok)
        except ValueError:
            names = ", ".join(e.value for e in order)
            raise SpecError(f"{key}: unknown value {tok!r} (expected one of {names})")
        if val not in out:
            out.append(val)
    return tuple(sorted(out, key=order.index))


@dataclass(frozen=True)
class ModelSpec:
    """Campaign restrictions over actions, bugs, impacts, sizes, knowledge.

    `impacts` filters reporting only; execution is never affected by it.
    An empty `bugs` set disables the bug-invoke action entirely.
    """

    actions: tuple[ActionKind, ...] = ACTION_ORDER
    bugs: tuple[BugKind, ...] = BUG_ORDER
    impacts: tuple[ImpactClass, ...] = IMPACT_ORDER
    size_groups: tuple[int, ...] = (0, 1, 2, 3, 4)
    sizes: tuple[int, ...] = ()
    knowledge: tuple[Knowledge, ...] = KNOWLEDGE_ORDER

    def __post_init__(self) -> None:
        if not self.actions:
            raise SpecError("actions: must be non-empty")
        if not self.size_groups and not self.sizes:
            raise SpecError("size_groups and sizes cannot both be empty")
        for g in self.size_groups:
            if not 0 <= g < NUM_GROUPS:
                raise SpecError(f"size_groups: index {g} out of range 0..4")
        for s in self.sizes:
            if s < 0:
                raise SpecError(f"sizes: negative size {s}")

    @property
    def enabled_actions(self) -> tuple[ActionKind, ...]:
        """Canonically ordered action kinds the codec may decode."""
        kinds = [k for k in ACTION_ORDER if k in self.actions]
        if not self.bugs:
            kinds = [k for k in kinds if k is not ActionKind.BUG_INVOKE]
        return tuple(kinds)

    @property
    def enabled_bugs(self) -> tuple[BugKind, ...]:
        return tuple(b for b in BUG_ORDER if b in self.bugs)

    def strategy_enabled(self, s: Strategy) -> bool:
        know = set(self.knowledge)
        if s is Strategy.P2:
            return Knowledge.BA in know
        if s is Strategy.P3:
            return Knowledge.HA in know
        if s is Strategy.P4:
            return Knowledge.CA in know
        if s is Strategy.I2:
            return len(know) >= 2
        return True

    @property
    def enabled_strategies(self) -> tuple[Strategy, ...]:
        return tuple(s for s in STRATEGY_ORDER if self.strategy_enabled(s))

    @property
    def i2_pairs(self) -> tuple[tuple[Knowledge, Knowledge], ...]:
        """Ordered role pairs available to the address-difference strategy."""
        known = [k for k in KNOWLEDGE_ORDER if k in self.knowledge]
        return tuple((a, b) for a in known for b in known if a is not b)

    @classmethod
    def default(cls) -> "ModelSpec":
        return cls()

    @classmethod
    def parse(cls, text: str) -> "ModelSpec":
        """Parse the line-oriented `key = value[,value...]` spec format."""
        fields: dict = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SpecError(f"line {lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key == "actions":
                fields["actions"] = _parse_values(ActionKind, ACTION_ORDER, raw, key)
            elif key == "bugs":
                fields["bugs"] = _parse_values(BugKind, BUG_ORDER, raw, key)
            elif key == "impacts":
                fields["impacts"] = _parse_values(ImpactClass, IMPACT_ORDER, raw, key)
            elif key == "knowledge":
                fields["knowledge"] = _parse_values(
                    Knowledge, KNOWLEDGE_ORDER, raw, key
                )
            elif key == "size_groups":
                if raw.strip() == "*":
                    fields["size_groups"] = tuple(range(NUM_GROUPS))
                else:
                    try:
                        groups = tuple(
                            sorted({int(t) for t in raw.split(",") if t.strip()})
                        )
                    except ValueError as e:
                        raise SpecError(f"size_groups: {e}")
                    fields["size_groups"] = groups
            elif key == "sizes":
                if raw.strip() == "*":
                    fields["sizes"] = ()
                else:
                    try:
                        fields["sizes"] = tuple(
                            int(t) for t in raw.split(",") if t.strip()
                        )
                    except ValueError as e:
                        raise SpecError(f"sizes: {e}")
            else:
                raise SpecError(f"line {lineno}: unknown key {key!r}")
        # 'bugs = ' with no values means no bugs; absence means all bugs
        return cls(**fields)

    def to_text(self) -> str:
        lines = [
            "actions = " + ",".join(a.value for a in self.actions),
            "bugs = " + ",".join(b.value for b in self.bugs),
            "impacts = " + ",".join(i.value for i in self.impacts),
            "size_groups = " + ",".join(str(g) for g in self.size_groups),
            "sizes = " + ",".join(str(s) for s in self.sizes),
            "knowledge = " + ",".join(k.value for k in self.knowledge),
        ]
        return "\n".join(lines) + "\n"
