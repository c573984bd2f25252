use crate::error::Result;
use crate::scalar::{cast_usize, Scalar};
use crate::tape::Tape;
use crate::tensor::{same_shape, Tensor};

/// Smooth-L1 error of `pred` against `target`, averaged over the pixels where
/// `mask` is nonzero. Per element, with `e = pred - target`:
/// `0.5 e^2` for `|e| < 1`, else `|e| - 0.5`.
///
/// An all-zero mask yields a constant zero with no gradient, so a sample
/// without any usable ground truth contributes nothing to training.
pub fn smooth_l1<T: Scalar>(
    tape: &mut Tape<T>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    same_shape(pred, target, "smooth_l1 pred/target")?;
    same_shape(pred, mask, "smooth_l1 pred/mask")?;

    let valid = mask.data().iter().filter(|&&m| m != T::zero()).count();
    if valid == 0 {
        return Ok(Tensor::scalar(T::zero()));
    }
    let n = cast_usize::<T>(valid);

    let half = cast_usize::<T>(1) / cast_usize::<T>(2);
    let mut total = T::zero();
    for ((&p, &t), &m) in pred
        .data()
        .iter()
        .zip(target.data().iter())
        .zip(mask.data().iter())
    {
        if m == T::zero() {
            continue;
        }
        let e = p - t;
        let a = e.abs();
        total += if a < T::one() { half * e * e } else { a - half };
    }
    let out = Tensor::scalar(total / n);

    if tape.is_recording() {
        let (pc, tc, mc) = (pred.clone(), target.clone(), mask.clone());
        tape.record(&out, move |gy, store| {
            let g = gy.data()[0] / n;
            let mut dp = vec![T::zero(); pc.numel()];
            for (i, ((&p, &t), &m)) in pc
                .data()
                .iter()
                .zip(tc.data().iter())
                .zip(mc.data().iter())
                .enumerate()
            {
                if m == T::zero() {
                    continue;
                }
                let e = p - t;
                // d/de smooth_l1 = clamp(e, -1, 1)
                let de = if e > T::one() {
                    T::one()
                } else if e < -T::one() {
                    -T::one()
                } else {
                    e
                };
                dp[i] = g * de;
            }
            let dt: Vec<T> = dp.iter().map(|&v| -v).collect();
            store.accumulate(pc.id(), Tensor::from_vec(pc.shape(), dp).expect("pred shape"));
            store.accumulate(tc.id(), Tensor::from_vec(tc.shape(), dt).expect("target shape"));
        });
    }
    Ok(out)
}
