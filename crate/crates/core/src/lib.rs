//! Dual cost-volume stereo matching on the CPU.
//!
//! The crate bundles a small reverse-mode tensor core (dense tensors, a
//! gradient tape, 2-D/3-D convolutions, batch norm) with the stereo pipeline
//! built on top of it: a shared-weight siamese feature backbone, two
//! complementary cost volumes, coupled hourglass aggregation, soft disparity
//! regression, and the training/evaluation harness around them.
//!
//! Everything is generic over the element type through [`Scalar`]; `f32` is
//! the training dtype and `f64` backs the finite-difference checks.

pub mod aggregation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod costvol;
pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod metrics;
pub mod ops;
pub mod model;
pub mod optim;
pub mod regression;
pub mod supervision;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{grad_check, grad_check_sampled, GradStore, Tape};
pub use tensor::{Tensor, TensorId};

/// Dense tensor over the training dtype.
pub type Tensor32 = Tensor<f32>;
/// Dense tensor over the verification dtype.
pub type Tensor64 = Tensor<f64>;
