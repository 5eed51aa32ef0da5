/*
 * Deterministic reference allocator with dlmalloc-style boundary tags.
 *
 * Compiled twice:
 *   libunsafe_unlink.so           -- no integrity checks; textbook unlink
 *   libchecked.so (-DENABLE_CHECKS) -- aborts with a stable message per check
 *
 * Layout: a fixed 1 MiB arena, one fast list (singly linked, chunk size
 * <= 128) and one unsorted-style doubly linked free list.  Chunks carry
 * prev_size / size boundary tags; bit 0 of size is PREV_IN_USE.  The
 * allocation logic is identical in both builds so that bug-free traces
 * behave the same; ENABLE_CHECKS only adds aborts.
 *
 * Single-threaded only.  Behaviour under concurrent use is undefined.
 */

#include <stddef.h>
#include <stdint.h>
#include <string.h>
#include <sys/mman.h>
#include <unistd.h>

#define ARENA_SIZE (1u << 20)
#define ARENA_HINT ((void *)0x210000000000ULL)
#define FAST_MAX 128
#define MIN_CHUNK 32
#define PREV_IN_USE ((size_t)1)

#ifndef MAP_FIXED_NOREPLACE
#define MAP_FIXED_NOREPLACE 0x100000
#endif

typedef struct chunk {
    size_t prev_size;
    size_t size; /* low 3 bits are flags; bit 0 = PREV_IN_USE */
    struct chunk *fd;
    struct chunk *bk;
} chunk_t;

static unsigned char *arena;
static chunk_t *top;
static chunk_t *fast_head;
static chunk_t list_head; /* sentinel of the doubly linked free list */

#define CHUNKSIZE(c) ((c)->size & ~(size_t)7)
#define MEM(c) ((void *)((char *)(c) + 16))
#define MEM2CHUNK(p) ((chunk_t *)((char *)(p)-16))
#define NEXT(c) ((chunk_t *)((char *)(c) + CHUNKSIZE(c)))

#ifdef ENABLE_CHECKS
static void die(const char *msg)
{
    size_t n = strlen(msg);
    ssize_t r = write(2, msg, n);
    r += write(2, "\n", 1);
    (void)r;
    __builtin_trap();
}
#define CHECK(cond, msg)       \
    do {                       \
        if (!(cond)) die(msg); \
    } while (0)
#else
#define CHECK(cond, msg) \
    do {                 \
    } while (0)
#endif

static int arena_init(void)
{
    void *p = mmap(ARENA_HINT, ARENA_SIZE, PROT_READ | PROT_WRITE,
                   MAP_PRIVATE | MAP_ANONYMOUS | MAP_FIXED_NOREPLACE, -1, 0);
    if (p == MAP_FAILED)
        p = mmap(NULL, ARENA_SIZE, PROT_READ | PROT_WRITE,
                 MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
    if (p == MAP_FAILED) return -1;
    arena = p;
    top = (chunk_t *)arena;
    top->prev_size = 0;
    top->size = ARENA_SIZE | PREV_IN_USE;
    list_head.fd = &list_head;
    list_head.bk = &list_head;
    fast_head = NULL;
    return 0;
}

static size_t req2size(size_t req)
{
    size_t sz = (req + 8 + 15) & ~(size_t)15;
    if (sz < MIN_CHUNK) sz = MIN_CHUNK;
    return sz;
}

/* Textbook unlink; the checked build validates the list invariant first. */
static void unlink_chunk(chunk_t *c)
{
    chunk_t *fd = c->fd;
    chunk_t *bk = c->bk;
    CHECK(fd->bk == c && bk->fd == c, "corrupted double-linked list");
    fd->bk = bk;
    bk->fd = fd;
}

void *malloc(size_t req)
{
    if (!arena && arena_init() != 0) return NULL;
    if (req > ARENA_SIZE) return NULL;
    size_t cs = req2size(req);

    if (cs <= FAST_MAX) {
        for (chunk_t **pp = &fast_head; *pp; pp = &(*pp)->fd) {
            chunk_t *c = *pp;
            if (CHUNKSIZE(c) >= cs) {
                *pp = c->fd;
                return MEM(c);
            }
        }
    } else {
        for (chunk_t *c = list_head.fd; c != &list_head; c = c->fd) {
            if (CHUNKSIZE(c) >= cs) {
                unlink_chunk(c);
                NEXT(c)->size |= PREV_IN_USE;
                return MEM(c);
            }
        }
    }

    /* carve from the top chunk */
    if (CHUNKSIZE(top) >= cs + MIN_CHUNK) {
        chunk_t *c = top;
        size_t tsz = CHUNKSIZE(top);
        size_t flags = c->size & 7;
        c->size = cs | flags;
        chunk_t *nt = NEXT(c);
        nt->prev_size = 0;
        nt->size = (tsz - cs) | PREV_IN_USE;
        top = nt;
        return MEM(c);
    }
    return NULL;
}

void free(void *p)
{
    if (!p) return;
    chunk_t *c = MEM2CHUNK(p);
    CHECK(((uintptr_t)p & 15) == 0 && (unsigned char *)c >= arena &&
              (unsigned char *)c < arena + ARENA_SIZE,
          "free(): invalid pointer");
    size_t cs = CHUNKSIZE(c);
    CHECK(cs >= MIN_CHUNK && (cs & 15) == 0 &&
              (unsigned char *)c + cs <= arena + ARENA_SIZE,
          "free(): invalid size");

    if (cs <= FAST_MAX) {
        CHECK(fast_head != c, "double free or corruption (fasttop)");
#ifdef ENABLE_CHECKS
        {
            chunk_t *nx = NEXT(c);
            CHECK(CHUNKSIZE(nx) >= MIN_CHUNK && CHUNKSIZE(nx) <= ARENA_SIZE,
                  "free(): invalid next size (fast)");
        }
#endif
        c->fd = fast_head;
        fast_head = c;
        return;
    }

    chunk_t *nx = NEXT(c);
    CHECK((unsigned char *)nx < arena + ARENA_SIZE, "free(): invalid size");
    CHECK(nx == top ||
              (CHUNKSIZE(nx) >= MIN_CHUNK && CHUNKSIZE(nx) <= ARENA_SIZE),
          "free(): invalid next size (normal)");
    CHECK(nx->size & PREV_IN_USE, "double free or corruption (!prev)");

    /* backward consolidation through the previous free chunk */
    if (!(c->size & PREV_IN_USE)) {
        size_t psz = c->prev_size;
        chunk_t *pc = (chunk_t *)((char *)c - psz);
        CHECK(CHUNKSIZE(pc) == psz, "corrupted size vs. prev_size");
        unlink_chunk(pc);
        pc->size = (psz + cs) | (pc->size & PREV_IN_USE);
        c = pc;
        cs += psz;
    }

    if (nx == top) {
        /* merge into the top chunk */
        c->size = (cs + CHUNKSIZE(top)) | (c->size & PREV_IN_USE);
        top = c;
        return;
    }

    c->fd = list_head.fd;
    c->bk = &list_head;
    list_head.fd->bk = c;
    list_head.fd = c;
    nx->prev_size = cs;
    nx->size &= ~PREV_IN_USE;
}

size_t malloc_usable_size(void *p)
{
    if (!p) return 0;
    return CHUNKSIZE(MEM2CHUNK(p)) - 8;
}
