//! Synthetic stereo generator. The right image is a multi-octave value-noise
//! texture; the disparity field is a slanted plane plus elliptical bumps with
//! a horizontal slope kept well below 1, so `x - d(x)` is strictly increasing
//! and the warp never folds over itself. The left image is produced by
//! linear inverse warping of the right image, which makes the ground truth
//! exact by construction: `left(x, y) = lerp(right, x - d(x, y), y)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::StereoSample;
use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub dmax: usize,
    /// Override the random disparity field with a constant. A value of 0
    /// makes the right image equal the left image exactly.
    pub flat: Option<f64>,
}

impl SynthConfig {
    pub fn new(height: usize, width: usize, dmax: usize) -> Result<Self> {
        if height % 32 != 0 || width % 32 != 0 {
            return Err(Error::config(format!(
                "synth: extents {}x{} must be multiples of 32",
                height, width
            )));
        }
        if dmax % 4 != 0 || dmax == 0 {
            return Err(Error::config(format!(
                "synth: dmax {} must be a positive multiple of 4",
                dmax
            )));
        }
        Ok(SynthConfig {
            height,
            width,
            dmax,
            flat: None,
        })
    }
}

/// Bilinear value noise: one random lattice per octave per channel, summed
/// with decaying amplitudes and squashed to [0.05, 0.95].
fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    const OCTAVES: [(usize, f64); 3] = [(16, 0.55), (8, 0.30), (4, 0.15)];
    let mut img = vec![0.0f64; 3 * h * w];
    for c in 0..3 {
        for (cell, amp) in OCTAVES {
            let gh = h / cell + 2;
            let gw = w / cell + 2;
            let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(0.0..1.0)).collect();
            for y in 0..h {
                let fy = y as f64 / cell as f64;
                let y0 = fy as usize;
                let ty = fy - y0 as f64;
                for x in 0..w {
                    let fx = x as f64 / cell as f64;
                    let x0 = fx as usize;
                    let tx = fx - x0 as f64;
                    let v00 = lattice[y0 * gw + x0];
                    let v01 = lattice[y0 * gw + x0 + 1];
                    let v10 = lattice[(y0 + 1) * gw + x0];
                    let v11 = lattice[(y0 + 1) * gw + x0 + 1];
                    let top = v00 + (v01 - v00) * tx;
                    let bot = v10 + (v11 - v10) * tx;
                    img[(c * h + y) * w + x] += amp * (top + (bot - top) * ty);
                }
            }
        }
    }
    // Octave amplitudes sum to 1, so values are already in [0, 1]; pull
    // them off the exact endpoints to keep interpolation strictly inside.
    for v in &mut img {
        *v = 0.05 + 0.9 * *v;
    }
    img
}

/// Slanted plane plus elliptical bumps, clipped to [0, dmax-1]. The
/// horizontal slope is budgeted: |plane| <= 0.1 and the bumps share 0.6,
/// so |dd/dx| < 0.75 everywhere and the warp map stays injective.
fn disparity_field(rng: &mut ChaCha8Rng, h: usize, w: usize, dmax: usize) -> Vec<f64> {
    let dm = dmax as f64;
    let a = rng.gen_range(0.25..0.6) * dm;
    let b = rng.gen_range(-0.1..0.1);
    let c = rng.gen_range(-0.05..0.05);

    struct Bump {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        amp: f64,
    }
    let n_bumps = rng.gen_range(2..=4);
    // Peak of |u (1 - u^2 - v^2)| over the unit disk is 2 / (3 sqrt 3), so
    // a bump's horizontal slope is at most 1.54 amp / rx.
    let per_bump_slope = 0.6 / n_bumps as f64;
    let bumps: Vec<Bump> = (0..n_bumps)
        .map(|_| {
            let rx = rng.gen_range(w as f64 / 8.0..w as f64 / 3.0);
            let ry = rng.gen_range(h as f64 / 8.0..h as f64 / 3.0);
            let amp_cap = per_bump_slope * rx / 1.54;
            let amp = rng.gen_range(0.3..1.0) * amp_cap * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Bump {
                cx: rng.gen_range(0.0..w as f64),
                cy: rng.gen_range(0.0..h as f64),
                rx,
                ry,
                amp,
            }
        })
        .collect();

    let mut field = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut d = a + b * x as f64 + c * y as f64;
            for bump in &bumps {
                let u = (x as f64 - bump.cx) / bump.rx;
                let v = (y as f64 - bump.cy) / bump.ry;
                let q2 = u * u + v * v;
                if q2 < 1.0 {
                    d += bump.amp * (1.0 - q2) * (1.0 - q2);
                }
            }
            field[y * w + x] = d.clamp(0.0, dm - 1.0);
        }
    }
    field
}

fn generate_one<T: Scalar>(cfg: SynthConfig, seed: u64) -> StereoSample<T> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let right = texture(&mut rng, h, w);
    let field = match cfg.flat {
        Some(d) => vec![d.clamp(0.0, cfg.dmax as f64 - 1.0); h * w],
        None => disparity_field(&mut rng, h, w, cfg.dmax),
    };

    let mut left = vec![0.0f64; 3 * h * w];
    let mut valid = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let xs = x as f64 - field[y * w + x];
            if xs < 0.0 {
                // Source column is out of frame; fill from the edge but
                // leave the pixel unsupervised.
                for ch in 0..3 {
                    left[(ch * h + y) * w + x] = right[(ch * h + y) * w];
                }
                continue;
            }
            let x0 = (xs as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let f = xs - x0 as f64;
            for ch in 0..3 {
                let r0 = right[(ch * h + y) * w + x0];
                let r1 = right[(ch * h + y) * w + x1];
                left[(ch * h + y) * w + x] = r0 + (r1 - r0) * f;
            }
            valid[y * w + x] = T::one();
        }
    }

    StereoSample {
        left: Tensor::from_vec(&[3, h, w], left.iter().map(|&v| cast::<T>(v)).collect())
            .expect("image shape"),
        right: Tensor::from_vec(&[3, h, w], right.iter().map(|&v| cast::<T>(v)).collect())
            .expect("image shape"),
        d_gt: Tensor::from_vec(&[h, w], field.iter().map(|&v| cast::<T>(v)).collect())
            .expect("field shape"),
        valid: Tensor::from_vec(&[h, w], valid).expect("mask shape"),
    }
}

/// Generate `n` deterministic samples. Sample `i` depends only on
/// `seed` and `i`, so regenerating any subset reproduces the same data.
pub fn synth_generate<T: Scalar>(
    cfg: SynthConfig,
    seed: u64,
    n: usize,
) -> Result<Vec<StereoSample<T>>> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let s = generate_one(cfg, seed.wrapping_add((i as u64).wrapping_mul(0x9E3779B97F4A7C15)));
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}
