//! Variational autoencoders for collaborative filtering, with an optional
//! adversarial head that scrubs a protected attribute from the latent space.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`tape`]: dense tensors and reverse-mode autodiff;
//! * [`model`]: encoder/sampler/decoder plus the gradient-reversal adversary;
//! * [`data`]: ingestion, filtering, fold splits and binary caching;
//! * [`train`] / [`attack`]: the optimizer loop and post-hoc attacker probes;
//! * [`metrics`] / [`stats`]: ranking and classification metrics with paired
//!   significance tests;
//! * [`experiment`]: configuration, synthetic data, and the command verbs
//!   used by the `advmv` binary.
//!
//! The math core is generic over the scalar type; experiments run in `f64`
//! via the aliases below.

pub mod attack;
pub mod binio;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod train;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Bound the worker pool used for large matrix products and parallel
/// attacker heads (0 keeps one thread per core). Effective once, before
/// any parallel work has run.
pub fn configure_workers(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Tensor type used by all experiments.
pub type Tensor64 = tensor::Tensor<f64>;

/// Autodiff tape over `f64`, the precision all experiments run in.
pub type Tape64 = tape::Tape<f64>;
