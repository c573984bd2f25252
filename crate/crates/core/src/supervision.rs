//! Two-scale training loss: the quarter-resolution regression is supervised
//! against strided-downsampled ground truth, the full-resolution output
//! against the original map, and the two smooth-L1 terms combine with fixed
//! weights.

use crate::error::{Error, Result};
use crate::ops::{add, scale, smooth_l1};
use crate::scalar::{cast, Scalar};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Mixing weights for the quarter- and full-resolution loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda0: f64,
    pub lambda1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda0: 0.3,
            lambda1: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda0: f64, lambda1: f64) -> Result<Self> {
        if lambda0 < 0.0 || lambda1 < 0.0 {
            return Err(Error::config(format!(
                "loss weights must be nonnegative, got ({}, {})",
                lambda0, lambda1
            )));
        }
        Ok(LossWeights { lambda0, lambda1 })
    }
}

/// Validity mask for sparse ground truth: 1 where `0 < d_gt < dmax`, else 0.
pub fn validity_mask<T: Scalar>(d_gt: &Tensor<T>, dmax: usize) -> Tensor<T> {
    let hi = cast::<T>(dmax as f64);
    d_gt.map(|v| {
        if v > T::zero() && v < hi {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Downsample ground truth `[B, H, W]` to quarter resolution by taking the
/// top-left sample of every 4x4 cell and dividing the disparity by 4. The
/// mask is sampled at the same positions so sparse validity is preserved
/// (pooling would blend valid and invalid pixels).
pub fn downsample_gt<T: Scalar>(
    d_gt: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, h, w] = d_gt.dims::<3>()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(format!(
            "downsample_gt: extents {}x{} must be multiples of 4",
            h, w
        )));
    }
    if mask.shape() != d_gt.shape() {
        return Err(Error::shape(format!(
            "downsample_gt: mask {:?} does not match ground truth {:?}",
            mask.shape(),
            d_gt.shape()
        )));
    }
    let (hq, wq) = (h / 4, w / 4);
    let quarter = cast::<T>(0.25);
    let gd = d_gt.data();
    let md = mask.data();
    let mut gq = vec![T::zero(); b * hq * wq];
    let mut mq = vec![T::zero(); b * hq * wq];
    for bi in 0..b {
        for y in 0..hq {
            for x in 0..wq {
                let src = (bi * h + y * 4) * w + x * 4;
                gq[(bi * hq + y) * wq + x] = gd[src] * quarter;
                mq[(bi * hq + y) * wq + x] = md[src];
            }
        }
    }
    Ok((
        Tensor::from_vec(&[b, hq, wq], gq)?,
        Tensor::from_vec(&[b, hq, wq], mq)?,
    ))
}

/// Weighted two-scale smooth-L1 loss. `d0` is the quarter-resolution
/// prediction, `d1` the full-resolution one; ground truth and mask are at
/// full resolution and downsampled internally for the `d0` term.
///
/// Returns the scalar loss and a flag that is true when the mask held no
/// valid pixel at all (the loss is then a constant zero).
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    d0: &Tensor<T>,
    d1: &Tensor<T>,
    d_gt: &Tensor<T>,
    mask: &Tensor<T>,
    w: LossWeights,
) -> Result<(Tensor<T>, bool)> {
    let (gt_q, mask_q) = downsample_gt(d_gt, mask)?;
    let l0 = smooth_l1(tape, d0, &gt_q, &mask_q)?;
    let l1 = smooth_l1(tape, d1, d_gt, mask)?;
    let l0 = scale(tape, &l0, cast::<T>(w.lambda0));
    let l1 = scale(tape, &l1, cast::<T>(w.lambda1));
    let loss = add(tape, &l0, &l1)?;
    let empty = mask.data().iter().all(|&m| m == T::zero());
    Ok((loss, empty))
}
