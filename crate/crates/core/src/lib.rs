//! Point tracking for echocardiography-like sequences.
//!
//! This crate is `no_std` (with `alloc`) and holds everything that does not
//! touch the filesystem: a small reverse-mode tensor engine, the tracking
//! network built on it, the training pipeline, a synthetic speckle-sequence
//! generator with exact ground truth, and the strain and trajectory metrics.
//! The `std` feature turns on runtime SIMD detection in matrix products and
//! uses the platform's float functions instead of `libm`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod config;
pub mod correlation;
pub mod encoder;
mod error;
pub mod gradcheck;
mod linalg;
pub mod model;
mod scalar;
pub mod strain;
pub mod synth;
mod tensor;
pub mod trajectory;
pub mod training;
pub mod transformer;
pub mod weights;

pub use autodiff::{Gradients, Tape, Var};
pub use config::ModelConfig;
pub use error::Error;
pub use model::{ForwardStats, Network};
pub use scalar::Real;
pub use tensor::Tensor;
pub use trajectory::{Clip, TrajectorySet};
pub use weights::WeightStore;

pub type Result<T, E = Error> = core::result::Result<T, E>;
