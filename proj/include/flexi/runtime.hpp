#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace flexi {

// Graphs allocate and free many mid-sized buffers per step. Keeping them on
// the heap instead of fresh mmaps roughly halves step time with glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace flexi
