"""Uniform interface to the allocator under test.

Three loading modes:
  * ``native``       - a private copy of the process's libc allocator,
                       loaded into a fresh linker namespace so fuzzing never
                       corrupts the interpreter's own heap;
  * ``so:PATH``      - any shared object exporting malloc/free (and
                       optionally malloc_usable_size);
  * ``bundled:NAME`` - one of the reference allocators shipped with this
                       package (unsafe-unlink, checked, page);
  * ``preload:PATH`` - resolve malloc/free from the process's global symbol
                       table; meaningful when the worker was started with
                       LD_PRELOAD pointing at the target library.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

WORD = 8

BUNDLED_LIBS = {
    "unsafe-unlink": "libunsafe_unlink.so",
    "checked": "libchecked.so",
    "page": "libpage.so",
}

_MALLOC = ctypes.CFUNCTYPE(ctypes.c_void_p, ctypes.c_size_t)
_FREE = ctypes.CFUNCTYPE(None, ctypes.c_void_p)
_USABLE = ctypes.CFUNCTYPE(ctypes.c_size_t, ctypes.c_void_p)

_LM_ID_NEWLM = -1
_RTLD_NOW = 2


class TargetError(RuntimeError):
    """The requested allocator target cannot be loaded."""


def bundled_search_dirs() -> list[Path]:
    dirs = []
    env = os.environ.get("HEAPPROBE_ALLOCATOR_DIR")
    if env:
        dirs.append(Path(env))
    dirs.append(Path.cwd() / "allocators" / "build")
    # repo layout: src/heapprobe/target.py -> <root>/allocators/build
    dirs.append(Path(__file__).resolve().parents[2] / "allocators" / "build")
    return dirs


def find_bundled(name: str) -> Path:
    try:
        lib = BUNDLED_LIBS[name]
    except KeyError:
        raise TargetError(
            f"unknown bundled allocator {name!r}; "
            f"expected one of {', '.join(sorted(BUNDLED_LIBS))}"
        )
    for d in bundled_search_dirs():
        p = d / lib
        if p.is_file():
            return p
    raise TargetError(
        f"bundled allocator {lib} not built; run `make` in allocators/ "
        f"or set HEAPPROBE_ALLOCATOR_DIR"
    )


@dataclass
class ChunkHandle:
    base: int
    request: int
    usable: int
    live: bool = True


class AllocatorTarget:
    """Wraps raw malloc/free/usable entry points behind one calling surface."""

    def __init__(self, ident: str, malloc_fn, free_fn, usable_fn,
                 native_usable: bool = False) -> None:
        self.id = ident
        self._malloc = malloc_fn
        self._free = free_fn
        self._usable = usable_fn
        self._native_usable = native_usable

    @property
    def has_usable_size(self) -> bool:
        return self._usable is not None or self._native_usable

    def allocate(self, size: int) -> int:
        """Returns the allocation address, 0 on failure (not an error)."""
        return self._malloc(size & ((1 << 64) - 1)) or 0

    def deallocate(self, address: int) -> None:
        self._free(address)

    def usable_size(self, address: int, request: int = 0) -> int:
        if address == 0:
            return 0
        if self._native_usable:
            # read the chunk's in-place size word; the library routine is
            # unreliable once metadata is corrupted.  Mapped-flag chunks
            # (bit 1) carry their header inside the mapping, so one more
            # word is off limits.
            word = ctypes.c_size_t.from_address(address - WORD).value
            return (word & ~7) - (2 * WORD if word & 2 else WORD)
        if self._usable is not None:
            return self._usable(address)
        # shim: request rounded up to word alignment
        return (request + WORD - 1) & ~(WORD - 1)

    @classmethod
    def from_descriptor(cls, desc: str) -> "AllocatorTarget":
        if desc == "native":
            return cls._load_native()
        if desc.startswith("so:"):
            return cls._load_shared(desc[3:], ident=desc)
        if desc.startswith("bundled:"):
            path = find_bundled(desc[8:])
            return cls._load_shared(str(path), ident=desc)
        if desc.startswith("preload:"):
            return cls._load_preloaded(desc)
        raise TargetError(
            f"bad target descriptor {desc!r}; expected native, so:PATH, "
            f"bundled:NAME or preload:PATH"
        )

    @classmethod
    def _load_shared(cls, path: str, ident: str) -> "AllocatorTarget":
        try:
            lib = ctypes.CDLL(path, mode=ctypes.RTLD_LOCAL)
        except OSError as e:
            raise TargetError(f"cannot load {path}: {e}")
        try:
            malloc_fn = lib.malloc
            free_fn = lib.free
        except AttributeError as e:
            raise TargetError(f"{path}: missing required symbol: {e}")
        malloc_fn.restype = ctypes.c_void_p
        malloc_fn.argtypes = [ctypes.c_size_t]
        free_fn.restype = None
        free_fn.argtypes = [ctypes.c_void_p]
        usable_fn = getattr(lib, "malloc_usable_size", None)
        if usable_fn is not None:
            usable_fn.restype = ctypes.c_size_t
            usable_fn.argtypes = [ctypes.c_void_p]
        tgt = cls(ident, malloc_fn, free_fn, usable_fn)
        tgt._lib = lib  # keep the handle alive
        return tgt

    @classmethod
    def _load_preloaded(cls, ident: str) -> "AllocatorTarget":
        lib = ctypes.CDLL(None)
        malloc_fn = lib.malloc
        malloc_fn.restype = ctypes.c_void_p
        malloc_fn.argtypes = [ctypes.c_size_t]
        free_fn = lib.free
        free_fn.restype = None
        free_fn.argtypes = [ctypes.c_void_p]
        usable_fn = getattr(lib, "malloc_usable_size", None)
        if usable_fn is not None:
            usable_fn.restype = ctypes.c_size_t
            usable_fn.argtypes = [ctypes.c_void_p]
        return cls(ident, malloc_fn, free_fn, usable_fn)

    @classmethod
    def _load_native(cls) -> "AllocatorTarget":
        """Load a second libc into a fresh linker namespace.

        The interpreter keeps using its own allocator; the namespaced copy
        has independent arenas, so corrupting it cannot take down the
        worker before the detector gets to look.
        """
        libc_path = ctypes.util.find_library("c") or "libc.so.6"
        dl = ctypes.CDLL(None, use_errno=True)
        dlmopen = dl.dlmopen
        dlmopen.restype = ctypes.c_void_p
        dlmopen.argtypes = [ctypes.c_long, ctypes.c_char_p, ctypes.c_int]
        handle = dlmopen(_LM_ID_NEWLM, libc_path.encode(), _RTLD_NOW)
        if not handle:
            raise TargetError("dlmopen of libc failed; native target unavailable")
        dlsym = dl.dlsym
        dlsym.restype = ctypes.c_void_p
        dlsym.argtypes = [ctypes.c_void_p, ctypes.c_char_p]

        def sym(name: str):
            addr = dlsym(handle, name.encode())
            if not addr:
                raise TargetError(f"native libc lacks symbol {name}")
            return addr

        malloc_fn = _MALLOC(sym("malloc"))
        free_fn = _FREE(sym("free"))
        tgt = cls("native", malloc_fn, free_fn, None, native_usable=True)
        tgt._handle = handle
        return tgt
