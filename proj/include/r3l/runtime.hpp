#pragma once

namespace r3l {

/// Keeps large temporaries (im2col buffers, batch matrices) on the heap
/// instead of mapping and unmapping them on every call. Executables call this
/// once at startup; it has no effect outside glibc.
void configure_allocator();

}  // namespace r3l
