"""heapprobe: discover heap-exploitation primitives in memory allocators.

Fuzzes model-guided heap action sequences against an allocator, detects
exploitation impacts through shadow-memory divergence, minimizes findings
by delta debugging, and emits compilable C reproduction programs.
"""

from .codec import TraceProgram, decode, encode, materialize
from .detector import ImpactReport
from .model import (
    CODEC_VERSION,
    ActionKind,
    BugKind,
    ImpactClass,
    Knowledge,
    ModelSpec,
    Site,
    Strategy,
)
from .target import AllocatorTarget

__all__ = [
    "ActionKind",
    "AllocatorTarget",
    "BugKind",
    "CODEC_VERSION",
    "ImpactClass",
    "ImpactReport",
    "Knowledge",
    "ModelSpec",
    "Site",
    "Strategy",
    "TraceProgram",
    "decode",
    "encode",
    "materialize",
]

__version__ = "0.1.0"
