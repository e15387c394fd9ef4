//! Allocator tuning for training processes.

/// Keeps freed memory in the process instead of returning it to the OS.
///
/// Each training step builds and drops a tape holding tens of megabytes in
/// large buffers. With glibc's defaults those buffers are mmapped and the
/// heap top is trimmed after every step, so every step pays for fresh page
/// faults. Call once at program start; a no-op on other platforms.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
