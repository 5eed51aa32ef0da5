"""Emit standalone C reproduction programs for findings.

The generated source replays the minimized trace against the target ABI,
mirrors the detector's bookkeeping with plain arrays (a container record
array plus shadow copies, and a page-aligned buffer), and exits 0 iff the
asserted (impact, site) reproduces.  Values stay symbolic: strategies
render as expressions over the program's own state, so the PoC is layout
independent exactly like the engine.
"""

from __future__ import annotations

import hashlib
import shlex
import subprocess
from pathlib import Path
from typing import Optional

from .codec import (
    Allocate,
    BufferWrite,
    BugInvoke,
    Deallocate,
    HeapWrite,
    TraceProgram,
    ValueSpec,
    encode,
)
from .detector import ImpactReport
from .model import (
    BUG_ORDER,
    GROUP_BOUNDS,
    I1_CONSTANTS,
    MASK64,
    BugKind,
    Knowledge,
    ModelSpec,
    Strategy,
)
from .target import find_bundled

DEFAULT_CC = "cc -O1 -Wall -Wextra"

_BUG_ID = {bug: i + 1 for i, bug in enumerate(BUG_ORDER)}
_BUG_COMMENT = {
    BugKind.OF: "heap overflow",
    BugKind.WF: "write after free",
    BugKind.AF: "arbitrary free",
    BugKind.FF: "double free",
    BugKind.O1: "off by one",
    BugKind.O1N: "off by one (NUL byte)",
}


class EmitError(RuntimeError):
    pass


def trace_hash(trace: bytes) -> str:
    return hashlib.sha256(trace).hexdigest()[:16]


def poc_filename(report: ImpactReport) -> str:
    target = report.target.replace(":", "-").replace("/", "_")
    return f"{target}_{report.impact}_{trace_hash(bytes.fromhex(report.trace_hex))}.c"


def _hex64(v: int) -> str:
    return f"UINT64_C({v & MASK64:#x})"


def _tx(expr: str, value: ValueSpec) -> str:
    t = value.transform
    if t.mode == "linear":
        return f"({t.a} * {expr} + {_hex64(t.b)})"
    if t.mode == "shift":
        return f"({expr} + {_hex64(t.b)})"
    return expr


_ALIGN = "& ~(uint64_t)7"


def _role_expr(role: Knowledge) -> str:
    if role is Knowledge.BA:
        return "(uint64_t)(uintptr_t)buf"
    if role is Knowledge.CA:
        return "(uint64_t)(uintptr_t)cont"
    return "(nrec ? (uint64_t)(uintptr_t)cont_shadow[nrec - 1].p : 0)"


def render_value(value: ValueSpec, spec: ModelSpec) -> str:
    """C expression computing the materialized word at runtime."""
    s = value.strategy
    if s is Strategy.I1:
        return _hex64(I1_CONSTANTS[value.const_index])
    if s is Strategy.I3:
        if spec.sizes:
            size = spec.sizes[value.group_byte % len(spec.sizes)]
        else:
            g = spec.size_groups[value.group_byte % len(spec.size_groups)]
            lo, hi = GROUP_BOUNDS[g], GROUP_BOUNDS[g + 1]
            size = lo + value.offset % (hi - lo)
        return _hex64(size)
    if s is Strategy.I4:
        base = f"req_of[{value.chunk}u % nrec]"
        return f"(nrec ? {_tx(base, value)} : 0)"
    if s is Strategy.I5:
        base = f"use_of[{value.chunk}u % nrec]"
        return f"(nrec ? {_tx(base, value)} : 0)"
    if s is Strategy.P1:
        return "UINT64_C(0)"
    if s is Strategy.I2:
        a, b = value.pair
        diff = f"({_role_expr(a)} - {_role_expr(b)})"
        return f"({_tx(diff, value)} {_ALIGN})"
    if s is Strategy.P2:
        return f"({_tx('(uint64_t)(uintptr_t)buf', value)} {_ALIGN})"
    if s is Strategy.P3:
        inner = f"({_tx('(uint64_t)(uintptr_t)cont_shadow[nrec - 1].p', value)} {_ALIGN})"
        return f"(nrec ? {inner} : 0)"
    # P4
    return f"({_tx('(uint64_t)(uintptr_t)cont', value)} {_ALIGN})"


def _match_macros(impact: str, site: str) -> str:
    alloc = "0"
    div = "0"
    if impact == "AC":
        alloc = "(ac)"
    elif impact == "OC":
        alloc = "((oc) && !(ac))"
    elif impact in ("AW", "RW"):
        rw_term = "(rw)" if impact == "RW" else "(!(rw))"
        site_term = "(sc)" if site == "container" else "(!(sc))"
        div = f"({rw_term} && {site_term})"
    return (f"#define MATCH_ALLOC(ac, oc) {alloc}\n"
            f"#define MATCH_DIVERGENCE(rw, sc) {div}\n")


_HARNESS = r"""
typedef struct { void *p; uint64_t sz; } rec_t;

static rec_t cont[256];          /* container emulation */
static rec_t cont_shadow[256];   /* pristine replica, synced on record */
static int live[256];
static uint64_t req_of[256];
static uint64_t use_of[256];
static uint64_t nrec;

static unsigned char buf[4096] __attribute__((aligned(4096)));
static unsigned char buf_shadow[4096];

static int hit;
static int committed;  /* 0 = no bug executed yet */

static int overlap(uint64_t a, uint64_t ae, uint64_t b, uint64_t be)
{
    return a < be && b < ae;
}

/* divergence check mirroring the detector: compare regions to shadows,
 * classify by action family, resynchronize */
static void chk(int allocfam)
{
    (void)allocfam;
    int cdiv = memcmp(cont, cont_shadow, sizeof cont) != 0;
    int bdiv = memcmp(buf, buf_shadow, sizeof buf) != 0;
    if (!cdiv && !bdiv)
        return;
    if (MATCH_DIVERGENCE(allocfam, cdiv))
        hit = 1;
    memcpy(cont_shadow, cont, sizeof cont);
    memcpy(buf_shadow, buf, sizeof buf);
}

/* allocation verdict + bookkeeping, mirroring the detector */
static void record(void *q, uint64_t sz)
{
    uint64_t a = (uint64_t)(uintptr_t)q;
    uint64_t e = a + (sz ? sz : 1);
    int ac = overlap(a, e, (uint64_t)(uintptr_t)cont,
                     (uint64_t)(uintptr_t)cont + sizeof cont)
          || overlap(a, e, (uint64_t)(uintptr_t)buf,
                     (uint64_t)(uintptr_t)buf + sizeof buf);
    int oc = 0;
    for (uint64_t i = 0; i < nrec; i++) {
        uint64_t b = (uint64_t)(uintptr_t)cont_shadow[i].p;
        uint64_t s = cont_shadow[i].sz ? cont_shadow[i].sz : 1;
        if (live[i] && overlap(a, e, b, b + s))
            oc = 1;
    }
    (void)ac;
    (void)oc;
    if (MATCH_ALLOC(ac, oc))
        hit = 1;
    cont[nrec].p = q;
    cont[nrec].sz = sz;
    cont_shadow[nrec] = cont[nrec];
    live[nrec] = 1;
    req_of[nrec] = sz;
    use_of[nrec] = usable_of(q, sz);
    nrec++;
}

static long pick(int want_live, unsigned raw) __attribute__((unused));
static long pick(int want_live, unsigned raw)
{
    long n = 0;
    for (uint64_t i = 0; i < nrec; i++)
        if (live[i] == want_live)
            n++;
    if (!n)
        return -1;
    long k = raw % n;
    for (uint64_t i = 0; i < nrec; i++)
        if (live[i] == want_live && k-- == 0)
            return (long)i;
    return -1;
}

static long slot_off(unsigned slot, uint64_t usable) __attribute__((unused));
static long slot_off(unsigned slot, uint64_t usable)
{
    if (slot < 8) {
        uint64_t off = slot * 8;
        return off + 8 <= usable ? (long)off : -1;
    }
    long off = (long)usable - (long)((16u - slot) * 8);
    return off >= 0 ? off : -1;
}
"""

_DLOPEN_GLUE = r"""
static void *(*target_malloc)(size_t);
static void (*target_free)(void *);
static size_t (*target_usable)(void *);

static void load_target(const char *path)
{
    void *h = dlopen(path, RTLD_NOW | RTLD_LOCAL);
    if (!h || !(target_malloc = (void *(*)(size_t))dlsym(h, "malloc"))
           || !(target_free = (void (*)(void *))dlsym(h, "free"))) {
        ssize_t r = write(2, "cannot load target\n", 19);
        (void)r;
        _exit(2);
    }
    target_usable = (size_t (*)(void *))dlsym(h, "malloc_usable_size");
}

#define MALLOC(n) target_malloc(n)
#define FREE(p) target_free(p)

static uint64_t usable_of(void *p, uint64_t req)
{
    if (target_usable)
        return target_usable(p);
    return (req + 7) & ~(uint64_t)7;
}
"""

_NATIVE_GLUE = r"""
#define MALLOC(n) malloc(n)
#define FREE(p) free(p)

/* in-place size word; the library routine misreports under corruption */
static uint64_t usable_of(void *p, uint64_t req)
{
    (void)req;
    uint64_t w = ((uint64_t *)p)[-1];
    return (w & ~(uint64_t)7) - ((w & 2) ? 16 : 8);
}
"""


def _emit_action(i: int, action, spec: ModelSpec, lines: list[str]) -> None:
    ind = "    "

    def put(s: str = "") -> None:
        lines.append(ind + s if s else "")

    if isinstance(action, Allocate):
        put(f"/* {i}: allocate */")
        put("{")
        put(f"    uint64_t sz = {render_value(action.size, spec)};")
        put("    void *q = MALLOC((size_t)sz);")
        put("    if (q)")
        put("        record(q, sz);")
        put("}")
        put("chk(1);")
    elif isinstance(action, Deallocate):
        put(f"/* {i}: deallocate */")
        put("if (nrec) {")
        put(f"    uint64_t i = {action.chunk}u % nrec;")
        put("    if (live[i]) {")
        put("        FREE(cont_shadow[i].p);")
        put("        live[i] = 0;")
        put("    }")
        put("}")
        put("chk(1);")
    elif isinstance(action, HeapWrite):
        put(f"/* {i}: heap write */")
        put("if (nrec) {")
        put(f"    uint64_t i = {action.chunk}u % nrec;")
        put("    if (live[i]) {")
        put(f"        long off = slot_off({action.slot}u, use_of[i]);")
        put("        if (off >= 0)")
        put("            *(uint64_t *)((char *)cont_shadow[i].p + off) = "
            f"{render_value(action.value, spec)};")
        put("    }")
        put("}")
        put("chk(0);")
    elif isinstance(action, BufferWrite):
        put(f"/* {i}: buffer write */")
        put(f"*(uint64_t *)(buf + {action.offset}) = "
            f"{render_value(action.value, spec)};")
        put(f"memcpy(buf_shadow + {action.offset}, buf + {action.offset}, 8);")
        put("chk(0);")
    else:
        _emit_bug(i, action, spec, put)
    put()


def _emit_bug(i: int, action: BugInvoke, spec: ModelSpec, put) -> None:
    bug = action.bug
    bid = _BUG_ID[bug]
    put(f"/* {i}: VULNERABILITY: {_BUG_COMMENT[bug]} */")
    if bug in (BugKind.OF, BugKind.O1, BugKind.O1N):
        put(f"if (!committed || committed == {bid}) {{")
        put(f"    long i = pick(1, {action.chunk}u);")
        put("    if (i >= 0) {")
        put(f"        committed = {bid};")
        if bug is BugKind.OF:
            put(f"        uint64_t v = {render_value(action.value, spec)};")
            put(f"        for (int j = 0; j < {action.count}; j++)")
            put("            *(uint64_t *)((char *)cont_shadow[i].p + use_of[i]"
                " + 8 * j) = v;")
        elif bug is BugKind.O1:
            put("        *((unsigned char *)cont_shadow[i].p + use_of[i]) = "
                f"(unsigned char){render_value(action.value, spec)};")
        else:
            put("        *((unsigned char *)cont_shadow[i].p + use_of[i]) = 0;")
        put("    }")
        put("}")
        put("chk(0);")
    elif bug is BugKind.WF:
        put(f"if (!committed || committed == {bid}) {{")
        put(f"    long i = pick(0, {action.chunk}u);")
        put("    if (i >= 0) {")
        put(f"        long off = slot_off({action.slot}u, use_of[i]);")
        put("        if (off >= 0) {")
        put(f"            committed = {bid};")
        put("            *(uint64_t *)((char *)cont_shadow[i].p + off) = "
            f"{render_value(action.value, spec)};")
        put("        }")
        put("    }")
        put("}")
        put("chk(0);")
    elif bug is BugKind.FF:
        put("{")
        put("    int fam = 0;")
        put(f"    if (!committed || committed == {bid}) {{")
        put(f"        long i = pick(0, {action.chunk}u);")
        put("        if (i >= 0) {")
        put(f"            committed = {bid};")
        put("            FREE(cont_shadow[i].p);")
        put("            fam = 1;")
        put("        }")
        put("    }")
        put("    chk(fam);")
        put("}")
    else:  # AF
        put("{")
        put("    int fam = 0;")
        put(f"    if (!committed || committed == {bid}) {{")
        put(f"        committed = {bid};")
        put(f"        FREE((void *)(uintptr_t)({render_value(action.value, spec)}));")
        put("        fam = 1;")
        put("    }")
        put("    chk(fam);")
        put("}")


def emit(program: TraceProgram, report: ImpactReport,
         spec: Optional[ModelSpec] = None) -> str:
    """Render the PoC source for a minimized, reproducing trace."""
    spec = spec or ModelSpec.default()
    target = report.target
    native_like = target == "native" or target.startswith("preload:")
    uses_dlopen = not native_like

    trace = encode(program, spec)
    head = [
        "/*",
        " * Generated heap-primitive reproduction.",
        f" * target: {target}",
        f" * impact: {report.impact}"
        + (f" in {report.site}" if report.site != "-" else ""),
        f" * bug: {report.bug}",
        f" * trace: {trace_hash(trace)}",
        f" * codec: {report.codec_version}",
        " * Exit status 0 iff the impact reproduces.",
        " */",
    ]
    includes = ["#include <stdint.h>", "#include <stdlib.h>",
                "#include <string.h>", "#include <unistd.h>"]
    if uses_dlopen:
        includes.insert(0, "#include <dlfcn.h>")
    if target.startswith("preload:"):
        includes.append("#include <malloc.h>")

    parts = ["\n".join(head), "\n".join(includes),
             _match_macros(report.impact, report.site)]
    if uses_dlopen:
        parts.append(_DLOPEN_GLUE.strip("\n"))
    elif target.startswith("preload:"):
        parts.append(
            "#define MALLOC(n) malloc(n)\n"
            "#define FREE(p) free(p)\n\n"
            "static uint64_t usable_of(void *p, uint64_t req)\n"
            "{\n"
            "    (void)req;\n"
            "    return malloc_usable_size(p);\n"
            "}"
        )
    else:
        parts.append(_NATIVE_GLUE.strip("\n"))
    parts.append(_HARNESS.strip("\n"))

    body: list[str] = []
    if uses_dlopen:
        if target.startswith("bundled:"):
            default_path = str(find_bundled(target[8:]))
        else:
            default_path = target[3:]
        body.append("int main(int argc, char **argv)")
        body.append("{")
        body.append(f'    load_target(argc > 1 ? argv[1] : "{default_path}");')
    else:
        body.append("int main(void)")
        body.append("{")
    body.append("")
    for i, action in enumerate(program.actions):
        _emit_action(i, action, spec, body)
    body.append("    if (hit) {")
    body.append('        ssize_t r = write(2, "impact reproduced\\n", 18);')
    body.append("        (void)r;")
    body.append("        return 0;")
    body.append("    }")
    body.append('    ssize_t r = write(2, "impact not reproduced\\n", 22);')
    body.append("    (void)r;")
    body.append("    return 1;")
    body.append("}")
    parts.append("\n".join(body))
    return "\n\n".join(parts) + "\n"


def compile_poc(source_path: Path, out_path: Path,
                cc: str = DEFAULT_CC) -> None:
    cmd = shlex.split(cc) + ["-o", str(out_path), str(source_path), "-ldl"]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise EmitError(f"compilation failed:\n{proc.stderr}")


def run_poc(binary: Path, timeout: float = 10.0) -> int:
    try:
        proc = subprocess.run([str(binary)], capture_output=True,
                              timeout=timeout)
    except subprocess.TimeoutExpired:
        return 124
    return proc.returncode
