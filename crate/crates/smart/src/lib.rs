//! File formats, checkpoints and experiment drivers around `smart_core`.

pub mod ablate;
pub mod checkpoint;
pub mod config;
mod error;
pub mod experiment;
pub mod sweep;
pub mod tables;

pub use error::{Error, Result};

/// Keep large tensor buffers on the heap instead of fresh mmaps, which
/// otherwise dominate runtime through page faults on every step.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
pub fn tune_allocator() {
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
pub fn tune_allocator() {}
