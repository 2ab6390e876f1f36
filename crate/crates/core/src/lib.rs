//! Two-stage, detail-aware garment deformation.
//!
//! A coarse generator drapes a garment over a posed parametric body; a detail
//! generator conditioned on fit, body shape and pose adds the fine wrinkles.
//! Both stages predict every vertex displacement as a nonnegative magnitude
//! times a unit direction. Ground truth comes from the built-in cloth
//! simulator in [`oracle`].

pub mod autodiff;
pub mod body;
pub mod checkpoint;
pub mod error;
pub mod fit;
pub mod gnn;
pub mod mesh;
pub mod oracle;
pub mod pipeline;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};

/// Keeps large tensor buffers on the heap instead of fresh `mmap` regions.
///
/// Training allocates and frees many buffers of a few hundred kilobytes per
/// step; with the glibc defaults each one is a separate mapping and the page
/// faults dominate. Call once at startup. A no-op on other platforms.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 64 << 20);
    }
}
