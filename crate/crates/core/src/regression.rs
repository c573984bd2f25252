//! Disparity read-out: soft regression over the top-k cost slices at quarter
//! resolution, then content-aware upsampling where every full-resolution
//! pixel takes a convex combination of the 3x3 coarse neighborhood around its
//! cell, scaled by 4 to convert quarter-resolution disparity units to pixels.

use crate::error::{Error, Result};
use crate::ops::softmax_axis;

/// Number of cost slices the soft regression spans.
pub const TOP_K: usize = 2;
use crate::scalar::{cast, cast_usize, Scalar};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Soft-argmax over the `k` largest entries of each disparity lane.
///
/// Per pixel: the k largest values along the disparity axis are selected
/// (ties broken toward the smaller index), softmax-normalized, and the
/// result is the weighted mean of their indices. Output is `[B, H, W]` in
/// quarter-resolution disparity units, bounded by `[0, Dq-1]`.
pub fn topk_regress<T: Scalar>(tape: &mut Tape<T>, agg: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [b, c, dq, h, w] = agg.dims::<5>()?;
    if c != 1 {
        return Err(Error::shape(format!(
            "topk_regress: expected a single-channel volume, got {} channels",
            c
        )));
    }
    if k == 0 || k > dq {
        return Err(Error::shape(format!(
            "topk_regress: k={} outside 1..={}",
            k, dq
        )));
    }
    let plane = h * w;
    let ad = agg.data();

    // Per pixel: indices of the k largest values, then softmax over them.
    let mut out = vec![T::zero(); b * plane];
    let mut picks: Vec<u32> = vec![0; b * plane * k];
    let mut probs = vec![T::zero(); b * plane * k];
    let mut lane: Vec<(T, usize)> = Vec::with_capacity(dq);
    for bi in 0..b {
        for p in 0..plane {
            lane.clear();
            for d in 0..dq {
                lane.push((ad[(bi * dq + d) * plane + p], d));
            }
            // Stable ordering: value descending, index ascending on ties.
            lane.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let sel = &lane[..k];
            let m = sel[0].0;
            let mut z = T::zero();
            for (v, _) in sel {
                z += (*v - m).exp();
            }
            let mut d0 = T::zero();
            for (j, (v, idx)) in sel.iter().enumerate() {
                let s = (*v - m).exp() / z;
                d0 += s * cast_usize::<T>(*idx);
                picks[(bi * plane + p) * k + j] = *idx as u32;
                probs[(bi * plane + p) * k + j] = s;
            }
            out[bi * plane + p] = d0;
        }
    }
    let out = Tensor::from_vec(&[b, h, w], out)?;

    if tape.is_recording() {
        let agg_id = agg.id();
        let agg_shape = agg.shape().to_vec();
        let d0 = out.clone();
        tape.record(&out, move |gy, store| {
            let gd = gy.data();
            let mut dx = vec![T::zero(); b * dq * plane];
            for bi in 0..b {
                for p in 0..plane {
                    let g = gd[bi * plane + p];
                    if g == T::zero() {
                        continue;
                    }
                    let mean = d0.data()[bi * plane + p];
                    for j in 0..k {
                        let idx = picks[(bi * plane + p) * k + j] as usize;
                        let s = probs[(bi * plane + p) * k + j];
                        let di = cast_usize::<T>(idx);
                        dx[(bi * dq + idx) * plane + p] += g * s * (di - mean);
                    }
                }
            }
            store.accumulate(
                agg_id,
                Tensor::from_vec(&agg_shape, dx).expect("volume shape"),
            );
        });
    }
    Ok(out)
}

/// Per-pixel convex weights over the 3x3 coarse neighborhood,
/// `[B, 9, H, W]`, normalized along the 9-axis.
pub struct SuperpixelWeights<T: Scalar>(Tensor<T>);

impl<T: Scalar> SuperpixelWeights<T> {
    /// Normalize raw per-pixel logits `[B, 9, H, W]`.
    pub fn from_logits(tape: &mut Tape<T>, logits: &Tensor<T>) -> Result<Self> {
        let [_, c, _, _] = logits.dims::<4>()?;
        if c != 9 {
            return Err(Error::shape(format!(
                "superpixel weights: expected 9 logit channels, got {}",
                c
            )));
        }
        Ok(SuperpixelWeights(softmax_axis(tape, logits, 1)?))
    }

    /// Spread per-cell logits `[B, 144, H/4, W/4]` (9 neighbors x 16
    /// sub-pixel positions) to per-pixel logits and normalize.
    pub fn from_cell_logits(tape: &mut Tape<T>, raw: &Tensor<T>) -> Result<Self> {
        let logits = spread_weights(tape, raw)?;
        Self::from_logits(tape, &logits)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Rearrange `[B, 144, H/4, W/4]` cell logits into `[B, 9, H, W]` pixel
/// logits. Channel `n*16 + p` of a cell holds neighbor-`n` logits for the
/// cell's sub-pixel position `p = (y%4)*4 + (x%4)`.
pub fn spread_weights<T: Scalar>(tape: &mut Tape<T>, raw: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, hq, wq] = raw.dims::<4>()?;
    if c != 144 {
        return Err(Error::shape(format!(
            "spread_weights: expected 144 channels (9 neighbors x 16 positions), got {}",
            c
        )));
    }
    let (h, w) = (hq * 4, wq * 4);
    let rd = raw.data();
    let mut out = vec![T::zero(); b * 9 * h * w];
    for bi in 0..b {
        for n in 0..9 {
            for y in 0..h {
                for x in 0..w {
                    let p = (y % 4) * 4 + (x % 4);
                    let src = ((bi * 144 + n * 16 + p) * hq + y / 4) * wq + x / 4;
                    out[((bi * 9 + n) * h + y) * w + x] = rd[src];
                }
            }
        }
    }
    let out = Tensor::from_vec(&[b, 9, h, w], out)?;

    if tape.is_recording() {
        let raw_id = raw.id();
        let raw_shape = raw.shape().to_vec();
        tape.record(&out, move |gy, store| {
            let gd = gy.data();
            let mut dx = vec![T::zero(); b * 144 * hq * wq];
            for bi in 0..b {
                for n in 0..9 {
                    for y in 0..h {
                        for x in 0..w {
                            let p = (y % 4) * 4 + (x % 4);
                            let dst = ((bi * 144 + n * 16 + p) * hq + y / 4) * wq + x / 4;
                            dx[dst] += gd[((bi * 9 + n) * h + y) * w + x];
                        }
                    }
                }
            }
            store.accumulate(raw_id, Tensor::from_vec(&raw_shape, dx).expect("raw shape"));
        });
    }
    Ok(out)
}

/// Upsample quarter-resolution disparity `[B, H/4, W/4]` to `[B, H, W]`
/// pixels: each output pixel is 4 times the weighted average of the 3x3
/// coarse neighborhood around its cell, neighborhoods clamped at the frame
/// edge.
pub fn superpixel_upsample<T: Scalar>(
    tape: &mut Tape<T>,
    d0: &Tensor<T>,
    weights: &SuperpixelWeights<T>,
) -> Result<Tensor<T>> {
    let [b, hq, wq] = d0.dims::<3>()?;
    let wt = weights.tensor();
    let [wb, _, h, w] = wt.dims::<4>()?;
    if wb != b || h != hq * 4 || w != wq * 4 {
        return Err(Error::shape(format!(
            "superpixel_upsample: weights {:?} do not match disparity {:?}",
            wt.shape(),
            d0.shape()
        )));
    }
    let four = cast::<T>(4.0);
    let d0d = d0.data();
    let wd = wt.data();

    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut out = vec![T::zero(); b * h * w];
    for bi in 0..b {
        for y in 0..h {
            let cy = (y / 4) as isize;
            for x in 0..w {
                let cx = (x / 4) as isize;
                let mut acc = T::zero();
                for n in 0..9 {
                    let ny = clamp(cy + n as isize / 3 - 1, hq);
                    let nx = clamp(cx + n as isize % 3 - 1, wq);
                    let wv = wd[((bi * 9 + n) * h + y) * w + x];
                    acc += wv * d0d[(bi * hq + ny) * wq + nx];
                }
                out[(bi * h + y) * w + x] = four * acc;
            }
        }
    }
    let out = Tensor::from_vec(&[b, h, w], out)?;

    if tape.is_recording() {
        let (d0c, wc) = (d0.clone(), wt.clone());
        tape.record(&out, move |gy, store| {
            let gd = gy.data();
            let mut dd0 = vec![T::zero(); d0c.numel()];
            let mut dw = vec![T::zero(); wc.numel()];
            for bi in 0..b {
                for y in 0..h {
                    let cy = (y / 4) as isize;
                    for x in 0..w {
                        let cx = (x / 4) as isize;
                        let g = four * gd[(bi * h + y) * w + x];
                        if g == T::zero() {
                            continue;
                        }
                        for n in 0..9 {
                            let ny = clamp(cy + n as isize / 3 - 1, hq);
                            let nx = clamp(cx + n as isize % 3 - 1, wq);
                            let wi = ((bi * 9 + n) * h + y) * w + x;
                            dd0[(bi * hq + ny) * wq + nx] += g * wc.data()[wi];
                            dw[wi] += g * d0c.data()[(bi * hq + ny) * wq + nx];
                        }
                    }
                }
            }
            store.accumulate(d0c.id(), Tensor::from_vec(d0c.shape(), dd0).expect("d0 shape"));
            store.accumulate(wc.id(), Tensor::from_vec(wc.shape(), dw).expect("weight shape"));
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{mul, sum_all};
    use crate::tape::grad_check;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_weights(b: usize, h: usize, w: usize) -> SuperpixelWeights<f64> {
        let logits = Tensor::zeros(&[b, 9, h, w]);
        SuperpixelWeights::from_logits(&mut Tape::disabled(), &logits).unwrap()
    }

    #[test]
    fn one_hot_volume_regresses_to_the_hot_index() {
        let mut vol = vec![0.0f64; 10 * 2 * 2];
        for p in 0..4 {
            vol[7 * 4 + p] = 40.0;
        }
        let agg = Tensor::from_vec(&[1, 1, 10, 2, 2], vol).unwrap();
        let d0 = topk_regress(&mut Tape::disabled(), &agg, 2).unwrap();
        for &v in d0.data() {
            assert_abs_diff_eq!(v, 7.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn equal_maxima_average_their_indices() {
        let mut vol = vec![0.0f64; 8];
        vol[3] = 5.0;
        vol[4] = 5.0;
        let agg = Tensor::from_vec(&[1, 1, 8, 1, 1], vol).unwrap();
        let d0 = topk_regress(&mut Tape::disabled(), &agg, 2).unwrap();
        assert_abs_diff_eq!(d0.data()[0], 3.5, epsilon = 1e-12);
    }

    #[test]
    fn k_equal_to_dq_matches_full_soft_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let agg = Tensor::<f64>::from_fn(&[1, 1, 6, 3, 4], |_| rng.gen_range(-2.0..2.0));
        let d0 = topk_regress(&mut Tape::disabled(), &agg, 6).unwrap();
        for p in 0..12 {
            let vals: Vec<f64> = (0..6).map(|d| agg.data()[d * 12 + p]).collect();
            let m = vals.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = vals.iter().map(|v| (v - m).exp()).sum();
            let want: f64 = vals
                .iter()
                .enumerate()
                .map(|(i, v)| (v - m).exp() / z * i as f64)
                .sum();
            assert_abs_diff_eq!(d0.data()[p], want, epsilon = 1e-5);
        }
    }

    #[test]
    fn regressed_disparity_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let agg = Tensor::<f64>::from_fn(&[2, 1, 5, 4, 4], |_| rng.gen_range(-10.0..10.0));
        let d0 = topk_regress(&mut Tape::disabled(), &agg, 2).unwrap();
        assert!(d0.data().iter().all(|&v| (0.0..=4.0).contains(&v)));
    }

    #[test]
    fn disparity_shift_moves_one_hot_regression() {
        let mut vol = vec![0.0f64; 8];
        vol[3] = 30.0;
        let agg = Tensor::from_vec(&[1, 1, 8, 1, 1], vol.clone()).unwrap();
        let mut shifted = vec![0.0f64; 8];
        shifted[4] = 30.0;
        let agg_s = Tensor::from_vec(&[1, 1, 8, 1, 1], shifted).unwrap();
        let a = topk_regress(&mut Tape::disabled(), &agg, 2).unwrap();
        let b = topk_regress(&mut Tape::disabled(), &agg_s, 2).unwrap();
        assert_abs_diff_eq!(b.data()[0] - a.data()[0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_disparity_upsamples_to_four_times() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let d0 = Tensor::<f64>::full(&[1, 3, 4], 2.5);
        let logits = Tensor::from_fn(&[1, 9, 12, 16], |_| rng.gen_range(-2.0..2.0));
        let w = SuperpixelWeights::from_logits(&mut Tape::disabled(), &logits).unwrap();
        let d1 = superpixel_upsample(&mut Tape::disabled(), &d0, &w).unwrap();
        assert_eq!(d1.shape(), &[1, 12, 16]);
        for &v in d1.data() {
            assert_abs_diff_eq!(v, 10.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn center_one_hot_weights_reduce_to_nearest_neighbor() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let d0 = Tensor::<f64>::from_fn(&[1, 2, 3], |_| rng.gen_range(0.0..5.0));
        // Huge logit on neighbor 4 (the center) saturates the softmax.
        let logits = Tensor::from_fn(&[1, 9, 8, 12], |i| {
            let n = (i / (8 * 12)) % 9;
            if n == 4 {
                60.0
            } else {
                0.0
            }
        });
        let w = SuperpixelWeights::from_logits(&mut Tape::disabled(), &logits).unwrap();
        let d1 = superpixel_upsample(&mut Tape::disabled(), &d0, &w).unwrap();
        for y in 0..8 {
            for x in 0..12 {
                let want = 4.0 * d0.data()[(y / 4) * 3 + x / 4];
                assert_abs_diff_eq!(d1.data()[y * 12 + x], want, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn upsample_matches_scalar_gather_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        let d0 = Tensor::<f64>::from_fn(&[2, 3, 4], |_| rng.gen_range(0.0..6.0));
        let logits = Tensor::from_fn(&[2, 9, 12, 16], |_| rng.gen_range(-1.0..1.0));
        let w = SuperpixelWeights::from_logits(&mut Tape::disabled(), &logits).unwrap();
        let d1 = superpixel_upsample(&mut Tape::disabled(), &d0, &w).unwrap();
        let wt = w.tensor();
        for bi in 0..2 {
            for y in 0..12 {
                for x in 0..16 {
                    let mut want = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let n = ((dy + 1) * 3 + dx + 1) as usize;
                            let ny = ((y as i64 / 4) + dy).clamp(0, 2) as usize;
                            let nx = ((x as i64 / 4) + dx).clamp(0, 3) as usize;
                            want += wt.data()[((bi * 9 + n) * 12 + y) * 16 + x]
                                * d0.data()[(bi * 3 + ny) * 4 + nx];
                        }
                    }
                    want *= 4.0;
                    let got = d1.data()[(bi * 12 + y) * 16 + x];
                    assert_abs_diff_eq!(got, want, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn upsample_is_linear_in_disparity() {
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        let a = Tensor::<f64>::from_fn(&[1, 2, 2], |_| rng.gen_range(0.0..3.0));
        let b = Tensor::<f64>::from_fn(&[1, 2, 2], |_| rng.gen_range(0.0..3.0));
        let sum = Tensor::from_vec(
            &[1, 2, 2],
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        let logits = Tensor::from_fn(&[1, 9, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let w = SuperpixelWeights::from_logits(&mut Tape::disabled(), &logits).unwrap();
        let ua = superpixel_upsample(&mut Tape::disabled(), &a, &w).unwrap();
        let ub = superpixel_upsample(&mut Tape::disabled(), &b, &w).unwrap();
        let us = superpixel_upsample(&mut Tape::disabled(), &sum, &w).unwrap();
        for i in 0..us.numel() {
            assert_abs_diff_eq!(us.data()[i], ua.data()[i] + ub.data()[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn spread_routes_cell_channels_to_subpixel_positions() {
        // Encode source coordinates in the values to verify the permutation.
        let raw = Tensor::<f64>::from_fn(&[1, 144, 2, 3], |i| i as f64);
        let out = spread_weights(&mut Tape::disabled(), &raw).unwrap();
        assert_eq!(out.shape(), &[1, 9, 8, 12]);
        for n in 0..9 {
            for y in 0..8 {
                for x in 0..12 {
                    let p = (y % 4) * 4 + (x % 4);
                    let src = ((n * 16 + p) * 2 + y / 4) * 3 + x / 4;
                    assert_eq!(out.data()[(n * 8 + y) * 12 + x], src as f64);
                }
            }
        }
    }

    #[test]
    fn zero_logits_give_uniform_ninths() {
        let w = uniform_weights(1, 8, 8);
        for &v in w.tensor().data() {
            assert_abs_diff_eq!(v, 1.0 / 9.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(86);
        let agg = Tensor::<f64>::from_fn(&[1, 1, 6, 2, 3], |_| rng.gen_range(-2.0..2.0));
        let r_small = Tensor::<f64>::from_fn(&[1, 2, 3], |_| rng.gen_range(-1.0..1.0));
        let topk = {
            let r = r_small.clone();
            move |t: &mut Tape<f64>, v: &Tensor<f64>| {
                let d0 = topk_regress(t, v, 2)?;
                let d0 = mul(t, &d0, &r)?;
                Ok(sum_all(t, &d0))
            }
        };
        assert!(grad_check(&topk, &agg, 1e-4).unwrap() < 1e-4);

        let d0 = Tensor::<f64>::from_fn(&[1, 2, 2], |_| rng.gen_range(0.0..4.0));
        let logits = Tensor::<f64>::from_fn(&[1, 9, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let r_big = Tensor::<f64>::from_fn(&[1, 8, 8], |_| rng.gen_range(-1.0..1.0));

        let wrt_d0 = {
            let (logits, r) = (logits.clone(), r_big.clone());
            move |t: &mut Tape<f64>, v: &Tensor<f64>| {
                let w = SuperpixelWeights::from_logits(t, &logits)?;
                let d1 = superpixel_upsample(t, v, &w)?;
                let d1 = mul(t, &d1, &r)?;
                Ok(sum_all(t, &d1))
            }
        };
        assert!(grad_check(&wrt_d0, &d0, 1e-4).unwrap() < 1e-4);

        let wrt_logits = {
            let (d0, r) = (d0.clone(), r_big.clone());
            move |t: &mut Tape<f64>, v: &Tensor<f64>| {
                let w = SuperpixelWeights::from_logits(t, v)?;
                let d1 = superpixel_upsample(t, &d0, &w)?;
                let d1 = mul(t, &d1, &r)?;
                Ok(sum_all(t, &d1))
            }
        };
        assert!(grad_check(&wrt_logits, &logits, 1e-4).unwrap() < 1e-4);

        let raw = Tensor::<f64>::from_fn(&[1, 144, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let wrt_raw = {
            let (d0_grid, r) = (
                Tensor::<f64>::from_fn(&[1, 2, 2], |_| rng.gen_range(0.0..4.0)),
                Tensor::<f64>::from_fn(&[1, 8, 8], |_| rng.gen_range(-1.0..1.0)),
            );
            move |t: &mut Tape<f64>, v: &Tensor<f64>| {
                let w = SuperpixelWeights::from_cell_logits(t, v)?;
                let d1 = superpixel_upsample(t, &d0_grid, &w)?;
                let d1 = mul(t, &d1, &r)?;
                Ok(sum_all(t, &d1))
            }
        };
        assert!(grad_check(&wrt_raw, &raw, 1e-4).unwrap() < 1e-4);
    }
}
