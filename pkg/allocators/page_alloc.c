/*
 * Negative-control allocator: every object lives in its own mmap'd pages
 * and there is no in-place metadata.  Sizes are tracked in a static side
 * table, so nothing an application writes can influence the allocator.
 *
 * Address space is never recycled: freed mappings stay reserved (read/write
 * revoked) instead of being unmapped.  Otherwise a stale pointer could come
 * to alias a later allocation that the kernel placed at the same address,
 * and a double free of the stale pointer would free live memory.
 *
 * Single-threaded only.
 */

#include <stddef.h>
#include <sys/mman.h>

#define PAGE 4096
#define MAX_LIVE 8192

static struct {
    void *p;
    size_t bytes; /* mapping length, multiple of PAGE */
    int freed;
} table[MAX_LIVE];

static size_t npages_for(size_t req)
{
    if (req == 0) return 1;
    return (req + PAGE - 1) / PAGE;
}

void *malloc(size_t req)
{
    if (req > (size_t)1 << 40) return NULL;
    size_t bytes = npages_for(req) * PAGE;
    for (int i = 0; i < MAX_LIVE; i++) {
        if (table[i].p == NULL) {
            void *p = mmap(NULL, bytes, PROT_READ | PROT_WRITE,
                           MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
            if (p == MAP_FAILED) return NULL;
            table[i].p = p;
            table[i].bytes = bytes;
            table[i].freed = 0;
            return p;
        }
    }
    return NULL;
}

void free(void *p)
{
    if (!p) return;
    for (int i = 0; i < MAX_LIVE; i++) {
        if (table[i].p == p) {
            if (!table[i].freed) {
                /* keep the region reserved so its address is never reused */
                mprotect(p, table[i].bytes, PROT_NONE);
                table[i].freed = 1;
            }
            return; /* double free: ignored */
        }
    }
    /* unknown pointer: ignore rather than guess a mapping length */
}

size_t malloc_usable_size(void *p)
{
    if (!p) return 0;
    for (int i = 0; i < MAX_LIVE; i++) {
        if (table[i].p == p && !table[i].freed) return table[i].bytes;
    }
    return 0;
}
