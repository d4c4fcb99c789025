//! Allocator tuning for the training loop.
//!
//! Every tape step allocates and frees tens of megabytes in large blocks.
//! With glibc's defaults those blocks are returned to the kernel on free and
//! faulted back in on the next step, which dominates small-model step time.

use std::sync::Once;

static TUNE: Once = Once::new();

/// Keeps freed heap memory mapped for reuse. Process-wide and idempotent;
/// a no-op off glibc.
pub fn retain_freed_memory() {
    TUNE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds; called once
        // before the allocation-heavy work starts.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
            libc::mallopt(libc::M_TOP_PAD, 64 << 20);
        }
    });
}
