//! Disparity evaluation: end-point error, the D1 outlier rate with its
//! ground-truth-relative threshold, and fixed-threshold bad-sigma rates.
//! All accumulation runs in f64 regardless of the tensor element type.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{same_shape, Tensor};

/// Aggregate quality of one or more disparity maps over their valid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean absolute disparity error in pixels.
    pub epe: f64,
    /// Percentage of pixels with error above max(3 px, 5% of ground truth).
    pub d1: f64,
    /// Percentage of pixels with error above each fixed threshold,
    /// as (sigma, percent) pairs in the order the thresholds were given.
    pub bad: Vec<(f64, f64)>,
    pub valid_pixels: usize,
}

fn fold_valid<T: Scalar>(
    d: &Tensor<T>,
    d_gt: &Tensor<T>,
    mask: &Tensor<T>,
    mut visit: impl FnMut(f64, f64),
) -> Result<usize> {
    same_shape(d, d_gt, "metric pred/gt")?;
    same_shape(d, mask, "metric pred/mask")?;
    let mut n = 0;
    for ((&p, &g), &m) in d.data().iter().zip(d_gt.data().iter()).zip(mask.data().iter()) {
        if m == T::zero() {
            continue;
        }
        n += 1;
        visit((p.to_f64() - g.to_f64()).abs(), g.to_f64());
    }
    if n == 0 {
        return Err(Error::EmptyEval("no valid pixels".into()));
    }
    Ok(n)
}

/// Mean absolute error in pixels over the valid pixels.
pub fn epe<T: Scalar>(d: &Tensor<T>, d_gt: &Tensor<T>, mask: &Tensor<T>) -> Result<f64> {
    let mut sum = 0.0;
    let n = fold_valid(d, d_gt, mask, |err, _| sum += err)?;
    Ok(sum / n as f64)
}

/// Percentage of valid pixels whose error exceeds max(3 px, 0.05 * gt).
pub fn d1_rate<T: Scalar>(d: &Tensor<T>, d_gt: &Tensor<T>, mask: &Tensor<T>) -> Result<f64> {
    let mut bad = 0usize;
    let n = fold_valid(d, d_gt, mask, |err, gt| {
        if err > f64::max(3.0, 0.05 * gt) {
            bad += 1;
        }
    })?;
    Ok(100.0 * bad as f64 / n as f64)
}

/// Percentage of valid pixels whose error strictly exceeds `sigma`.
pub fn bad_sigma<T: Scalar>(
    d: &Tensor<T>,
    d_gt: &Tensor<T>,
    mask: &Tensor<T>,
    sigma: f64,
) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::config(format!(
            "bad-sigma threshold must be positive, got {}",
            sigma
        )));
    }
    let mut bad = 0usize;
    let n = fold_valid(d, d_gt, mask, |err, _| {
        if err > sigma {
            bad += 1;
        }
    })?;
    Ok(100.0 * bad as f64 / n as f64)
}

/// Pools pixel-level error statistics across any number of samples, so a
/// dataset report weighs every valid pixel equally rather than every image.
#[derive(Debug, Clone)]
pub struct EvalAccumulator {
    sigmas: Vec<f64>,
    abs_err_sum: f64,
    d1_bad: usize,
    sigma_bad: Vec<usize>,
    n: usize,
}

impl EvalAccumulator {
    pub fn new(sigmas: &[f64]) -> Self {
        EvalAccumulator {
            sigmas: sigmas.to_vec(),
            abs_err_sum: 0.0,
            d1_bad: 0,
            sigma_bad: vec![0; sigmas.len()],
            n: 0,
        }
    }

    /// Fold one prediction into the pool. A sample without valid pixels is
    /// skipped rather than treated as an error; only the final report
    /// requires at least one pooled pixel.
    pub fn add<T: Scalar>(
        &mut self,
        d: &Tensor<T>,
        d_gt: &Tensor<T>,
        mask: &Tensor<T>,
    ) -> Result<()> {
        same_shape(d, d_gt, "metric pred/gt")?;
        same_shape(d, mask, "metric pred/mask")?;
        for ((&p, &g), &m) in d.data().iter().zip(d_gt.data().iter()).zip(mask.data().iter()) {
            if m == T::zero() {
                continue;
            }
            let gt = g.to_f64();
            let err = (p.to_f64() - gt).abs();
            self.n += 1;
            self.abs_err_sum += err;
            if err > f64::max(3.0, 0.05 * gt) {
                self.d1_bad += 1;
            }
            for (k, &s) in self.sigmas.iter().enumerate() {
                if err > s {
                    self.sigma_bad[k] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn report(&self) -> Result<EvalReport> {
        if self.n == 0 {
            return Err(Error::EmptyEval("no valid pixels".into()));
        }
        let n = self.n as f64;
        Ok(EvalReport {
            epe: self.abs_err_sum / n,
            d1: 100.0 * self.d1_bad as f64 / n,
            bad: self
                .sigmas
                .iter()
                .zip(&self.sigma_bad)
                .map(|(&s, &b)| (s, 100.0 * b as f64 / n))
                .collect(),
            valid_pixels: self.n,
        })
    }
}
