//! Variational low-rank adaptation on a small sequence transducer.
//!
//! The crate bundles a reverse-mode autodiff tape over dense `f64` matrices,
//! deterministic and variational LoRA adapters, the finite-KL variational
//! objective, data-driven layer priors, a synthetic speaker simulator, error
//! rate metrics, and the training/evaluation harness used by the CLI.

// `!(x > 0.0)` is deliberate throughout: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod elbo;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod prior;
pub mod rng;
pub mod sweep;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Matrix;
