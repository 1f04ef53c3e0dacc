//! Capsule-network and convolutional-network ablation lab.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: dense tensors with reverse-mode differentiation,
//! * [`nn`]: parameter initialisation, layers and Adam,
//! * [`capsule`]: squashing, votes, dynamic routing, margin loss, masking,
//! * [`model`]: configuration-driven architectures and parameter counting,
//! * [`data`]: MNIST ingestion and dataset synthesis,
//! * [`metrics`]: accuracy, semantic compactness and perturbation sweeps,
//! * [`train`]: training loops, checkpoints and run reports,
//! * [`experiment`]: configuration files and table emission for the CLI.
//!
//! Numerical code is generic over [`Scalar`]; `f32` is used for training and
//! `f64` for verification.

pub mod autodiff;
pub mod capsule;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
