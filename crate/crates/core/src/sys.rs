//! Process-level tuning for the CPU training loops.

use std::sync::Once;

static INIT: Once = Once::new();

/// Keeps multi-megabyte tensor buffers on the reusable heap instead of
/// per-allocation mmap regions. Training allocates and frees activation
/// tensors of a few MB thousands of times per iteration; with glibc's
/// default dynamic mmap threshold those round-trips cost page faults that
/// rival the arithmetic itself. Idempotent, call from any entry point.
pub fn tune_allocator() {
    INIT.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    });
}
