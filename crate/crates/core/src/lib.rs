//! Sharpness-aware minimization laboratory.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: `f64` tensors, named parameter vectors, and a
//!   tape-based reverse-mode differentiator.
//! * [`models`]: an MLP classifier and an encoder-only transformer.
//! * [`optim`]: SGD, momentum, Adam, and AdaFactor.
//! * [`sam`]: the SAM meta-optimizer, including ascent micro-batches and
//!   m-sharpness.
//! * [`sharpness`]: worst-case loss probes, Hessian eigenvalue estimates, and
//!   loss-surface slices.
//! * [`tasks`]: synthetic datasets and nested subsampling.
//! * [`harness`]: config-driven runs, sweeps, overhead timing, and file formats.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod models;
pub mod objective;
pub mod optim;
pub mod par;
pub mod rng;
pub mod sam;
pub mod sharpness;
pub mod tasks;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
pub use objective::{Batch, LossFn, Objective};
pub use par::Exec;
pub use tensor::{GradVector, ParamVector, Tensor};
