//! Dataset plumbing: the in-memory sample type, a synthetic stereo
//! generator with exact ground truth, and single-file disparity codecs.

pub mod pfm;
pub mod png;
pub mod synth;

pub use synth::{synth_generate, SynthConfig};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One rectified stereo pair with per-pixel ground truth.
///
/// Images are `[3, H, W]` with values in `[0, 1]`; `d_gt` is `[H, W]` in
/// pixels at full resolution; `valid` is `[H, W]` with 1 marking pixels
/// whose ground truth may be used.
#[derive(Debug, Clone)]
pub struct StereoSample<T: Scalar> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
    pub d_gt: Tensor<T>,
    pub valid: Tensor<T>,
}

impl<T: Scalar> StereoSample<T> {
    /// Check the cross-field shape and range invariants, naming the first
    /// violation. Loaders call this so corrupt inputs fail loudly.
    pub fn validate(&self) -> Result<()> {
        let [cl, h, w] = self.left.dims::<3>()?;
        let [cr, hr, wr] = self.right.dims::<3>()?;
        if cl != 3 || cr != 3 {
            return Err(Error::data("stereo sample: images must have 3 channels"));
        }
        if (hr, wr) != (h, w) || self.d_gt.shape() != [h, w] || self.valid.shape() != [h, w] {
            return Err(Error::data(format!(
                "stereo sample: extents disagree (left {:?}, right {:?}, gt {:?}, valid {:?})",
                self.left.shape(),
                self.right.shape(),
                self.d_gt.shape(),
                self.valid.shape()
            )));
        }
        for t in [&self.left, &self.right] {
            if !t.all_finite() || t.data().iter().any(|&v| v < T::zero() || v > T::one()) {
                return Err(Error::data("stereo sample: image values must lie in [0, 1]"));
            }
        }
        for (&d, &m) in self.d_gt.data().iter().zip(self.valid.data().iter()) {
            if m != T::zero() && m != T::one() {
                return Err(Error::data("stereo sample: valid mask must be 0/1"));
            }
            if m == T::one() && (d < T::zero() || !d.is_finite()) {
                return Err(Error::data(
                    "stereo sample: ground truth must be finite and nonnegative where valid",
                ));
            }
        }
        Ok(())
    }

    /// Ground-truth mask as 0/1, additionally excluding disparities at or
    /// beyond `dmax` so supervision never points outside the search range.
    pub fn train_mask(&self, dmax: usize) -> Tensor<T> {
        let hi = crate::scalar::cast::<T>(dmax as f64);
        Tensor::from_vec(
            self.valid.shape(),
            self.valid
                .data()
                .iter()
                .zip(self.d_gt.data().iter())
                .map(|(&m, &d)| if m == T::one() && d < hi { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("mask shape")
    }
}
