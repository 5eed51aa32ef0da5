"""Catalog of allocator integrity checks and their abort messages.

Each entry maps a stable check id to the exact message the allocator
prints before aborting.  Classification picks the longest catalog message
contained in the captured stderr text, so more specific variants (e.g. the
"(not small)" form) win over their prefixes.
"""

from __future__ import annotations

from typing import Optional

# check-id -> abort message
CATALOG: dict[str, str] = {
    # data structure integrity
    "D1": "corrupted double-linked list",
    "D2": "corrupted double-linked list (not small)",
    "D3": "free(): corrupted unsorted chunks",
    "D4": "malloc(): corrupted unsorted chunks 1",
    "D5": "malloc(): corrupted unsorted chunks 2",
    "D6": "malloc(): smallbin double linked list corrupted",
    # size range constraints
    "S1": "free(): invalid next size (fast)",
    "S2": "free(): invalid next size (normal)",
    "S3": "free(): invalid size",
    "S4": "malloc(): memory corruption",
    # freeable memory checks
    "F1": "double free or corruption (!prev)",
    "F2": "double free or corruption (fasttop)",
    "F3": "double free or corruption (top)",
    "F4": "double free or corruption (out)",
    # uniform size checks
    "U1": "malloc(): memory corruption (fast)",
    "U2": "malloc_consolidate(): invalid chunk size",
    # specialized checks
    "SP1": "break adjusted to free malloc space",
    "SP2": "corrupted size vs. prev_size",
    "SP3": "free(): invalid pointer",
    "SP4": "munmap_chunk(): invalid pointer",
    "SP5": "invalid fastbin entry (free)",
}


def classify_abort(message: str) -> Optional[str]:
    """Map an abort message (or whole stderr capture) to a check id."""
    best: Optional[str] = None
    best_len = 0
    for check_id, needle in CATALOG.items():
        if needle in message and len(needle) > best_len:
            best = check_id
            best_len = len(needle)
    return best
