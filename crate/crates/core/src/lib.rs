//! Deterministic CPU stack for mask-transformer segmentation with
//! offset-adjusted deformable attention.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense tensors with reverse-mode autodiff, the differentiable
//!   kernels (matmul, conv2d, bilinear sampling/resizing, softmax, ...), a
//!   finite-difference gradient checker, and an Adam optimizer step.
//! - [`deform`] — multi-scale deformable attention with a deepened offset head,
//!   the offset-adjustment strategies, and sampling-spread statistics.
//! - [`model`] — the end-to-end network: tiny CNN backbone, deformable-attention
//!   pixel decoder with optional fourth-map fusion, masked-attention query
//!   decoder, and auxiliary heads.
//! - [`loss`] — Hungarian set matching and the Dice/CE/BCE loss stack.
//! - [`phantom`] — synthetic small-organ phantom generator and raster I/O.
//! - [`metrics`], [`train`], [`ablate`], [`checkpoint`] — evaluation, the
//!   deterministic training loop, the ablation runner, and persistence.
//!
//! Every result is a pure, bit-reproducible function of seeds and configs.

pub mod ablate;
pub mod checkpoint;
pub mod deform;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{Elem, Tensor};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

static THREAD_CAP: AtomicUsize = AtomicUsize::new(0);
static THREAD_CAP_INIT: OnceLock<()> = OnceLock::new();

/// Maximum number of worker threads kernels may use. `0` or `1` means
/// sequential execution (the reference mode). Parallel and sequential
/// execution are bitwise identical: threads only ever write disjoint output
/// slices and every reduction runs in a fixed order.
///
/// Initialized from `NEARQUERY_THREADS` on first read; override with
/// [`set_thread_cap`].
pub fn thread_cap() -> usize {
    THREAD_CAP_INIT.get_or_init(|| {
        let from_env = std::env::var("NEARQUERY_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or_else(|| {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            });
        THREAD_CAP.store(from_env, Ordering::Relaxed);
    });
    THREAD_CAP.load(Ordering::Relaxed)
}

/// Set the kernel thread cap programmatically (takes precedence over the
/// environment). Results do not depend on the cap.
pub fn set_thread_cap(n: usize) {
    THREAD_CAP_INIT.get_or_init(|| ());
    THREAD_CAP.store(n, Ordering::Relaxed);
}
