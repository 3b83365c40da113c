//! Configuration files and subcommands of the `cpcr` binary.

pub mod commands;
pub mod config;

pub use config::{DatasetSource, Profile, RunConfig};

/// Keeps freed buffers in the heap instead of returning them to the
/// kernel; the training loop reallocates the same large activations every
/// step and would otherwise pay page faults each time.
pub fn tune_allocator() {
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
