//! Instrumentation for the empirical gradient-similarity (neural tangent)
//! kernel of small fully-connected networks.
//!
//! The crate trains scalar-output networks with gradient descent, snapshots
//! them along the way, and analyses the Gramian `G_t = A_t^T A_t` of
//! per-sample parameter gradients at every snapshot:
//!
//! - [`nn`]: network, datasets, L2 loss and the training loop.
//! - [`spectral`]: Gramian/FIM construction, eigendecomposition, kernel
//!   eigenfunction estimates at unseen points.
//! - [`dynamics`]: first-order and closed-form constant-kernel dynamics,
//!   Hessian-vector products and the first-order Gramian change.
//! - [`alignment`]: relative-energy metrics of vectors inside top eigenspaces.
//! - [`fourier`]: Fourier transforms of functions known only at sample points.
//! - [`harness`]: configuration-driven experiments and report bundles.
//! - [`io`]: binary checkpoint/matrix containers, PGM images, atomic writes.

pub mod alignment;
pub mod dynamics;
pub mod error;
pub mod fourier;
pub mod harness;
pub mod io;
pub mod nn;
pub mod spectral;

pub use error::{Error, Result};

/// Keeps glibc from returning every activation-sized block to the kernel.
///
/// Batch matrices of a few hundred kilobytes sit above the default mmap
/// threshold, so each training step otherwise pays for fresh mappings and
/// page faults. Call once at startup; a no-op off glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 64 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 128 << 20);
    }
}
