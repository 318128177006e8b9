//! Image classifier built from a dynamic KNN-graph convolution pyramid
//! with a capsule routing head, together with everything needed to train
//! and evaluate it: a dense tensor library with reverse-mode autodiff and
//! finite-difference verification, deterministic data pipeline, AdamW
//! training loop, metrics, and binary checkpoints.

pub mod backbone;
pub mod capsule;
pub mod census;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Caps worker parallelism. Reads the PVGC_THREADS environment variable
/// and sizes the global thread pool accordingly; call once at startup.
/// Parallel kernels only ever split disjoint output regions, so results
/// are bitwise identical for any thread count.
pub fn configure_threads() {
    if let Ok(v) = std::env::var("PVGC_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
