//! Differentiable tensor operations.
//!
//! Every public function runs its forward kernel and, when the tape is
//! recording, registers a hand-written VJP. The finite-difference suite in
//! the gradcheck harness validates each rule.

mod batchnorm;
mod conv2d;
mod conv3d;
mod elementwise;
mod loss;
mod shape;
mod softmax;

pub use batchnorm::batch_norm;
pub use conv2d::{conv2d, Conv2dSpec};
pub use conv3d::{conv3d, conv3d_transposed, Conv3dSpec};
pub use elementwise::{add, leaky_relu, mul, relu, scale, sub, sum_all};
pub use loss::smooth_l1;
pub use shape::{concat_channels, crop_dim2, pad_dim2};
pub use softmax::softmax_axis;

/// Batch-norm (and general layer) execution mode.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}
