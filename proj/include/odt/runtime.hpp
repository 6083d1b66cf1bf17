#pragma once

// Process-level setup shared by the executables.

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace odt {

/// The training loop allocates and frees the same few hundred-kilobyte
/// activation buffers every iteration. glibc would hand each one back to the
/// kernel (mmap/munmap or heap trimming), which costs more than the math.
inline void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace odt
