//! Mixture-of-lookup-experts language models at desk scale.
//!
//! The crate trains small dense, MoE and MoLE transformers with hand-written
//! backpropagation, turns a trained MoLE model's routed experts into per-layer
//! lookup tables, stores those tables in a versioned offload file (optionally
//! NF4/NF3 quantized), decodes from them while metering transfer volume, and
//! reproduces the closed-form cost accounting that compares the approaches.

pub mod analyst;
pub mod engine;
pub mod error;
pub mod kernels;
pub mod lut_store;
pub mod model;
pub mod reparam;
pub mod trainer;

pub use error::{Error, Result};
pub use kernels::{Precision, Scalar, Tensor};
pub use model::{ModelConfig, ModelParams, Variant};

/// Environment variable capping worker threads for table builds and fetches.
pub const THREADS_ENV: &str = "MOLE_RT_THREADS";

/// Worker thread budget: `MOLE_RT_THREADS` when set to a positive integer,
/// otherwise the available parallelism.
pub fn runtime_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
