use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution over `[B, C, H, W]` input.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
}

impl Conv2dSpec {
    pub fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        Conv2dSpec {
            stride: (stride, stride),
            pad: (pad, pad),
            dilation: (dilation, dilation),
        }
    }
}

pub(crate) fn out_extent(
    n_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<usize> {
    if stride == 0 || dilation == 0 || k == 0 {
        return Err(Error::shape("conv: stride, dilation, kernel must be nonzero"));
    }
    let eff = dilation * (k - 1) + 1;
    let padded = n_in + 2 * pad;
    if padded < eff {
        return Err(Error::shape(format!(
            "conv: input extent {} with pad {} smaller than effective kernel {}",
            n_in, pad, eff
        )));
    }
    Ok((padded - eff) / stride + 1)
}

/// Output index range `[lo, hi]` such that `o*stride + offset` stays inside
/// `[0, n_in)`, clamped to `[0, n_out)`. `None` when empty.
#[inline]
pub(crate) fn valid_out_range(
    n_in: usize,
    n_out: usize,
    stride: usize,
    offset: isize,
) -> Option<(usize, usize)> {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = (n_in as isize - 1 - offset).div_euclid(s);
    let hi = hi.min(n_out as isize - 1);
    if lo > hi || hi < 0 {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

struct Geom {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

fn geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: Conv2dSpec) -> Result<Geom> {
    let [b, ci, h, wd] = x.dims::<4>()?;
    let [co, wci, kh, kw] = w.dims::<4>()?;
    if wci != ci {
        return Err(Error::shape(format!(
            "conv2d: input has {} channels, kernel expects {}",
            ci, wci
        )));
    }
    let ho = out_extent(h, kh, spec.stride.0, spec.pad.0, spec.dilation.0)?;
    let wo = out_extent(wd, kw, spec.stride.1, spec.pad.1, spec.dilation.1)?;
    Ok(Geom {
        b,
        ci,
        h,
        w: wd,
        co,
        kh,
        kw,
        ho,
        wo,
        spec,
    })
}

fn forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &Geom) -> Vec<T> {
    let (sy, sx) = g.spec.stride;
    let (py, px) = (g.spec.pad.0 as isize, g.spec.pad.1 as isize);
    let (dy, dx) = g.spec.dilation;
    let mut out = vec![T::zero(); g.b * g.co * g.ho * g.wo];
    for bi in 0..g.b {
        let x_img = &x[bi * g.ci * g.h * g.w..][..g.ci * g.h * g.w];
        let out_img = &mut out[bi * g.co * g.ho * g.wo..][..g.co * g.ho * g.wo];
        for o in 0..g.co {
            let out_plane = &mut out_img[o * g.ho * g.wo..][..g.ho * g.wo];
            if let Some(bv) = bias {
                out_plane.fill(bv[o]);
            }
            for c in 0..g.ci {
                let x_plane = &x_img[c * g.h * g.w..][..g.h * g.w];
                let w_base = (o * g.ci + c) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let off_y = (ky * dy) as isize - py;
                    let Some((oy_lo, oy_hi)) = valid_out_range(g.h, g.ho, sy, off_y) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let wv = w[w_base + ky * g.kw + kx];
                        let off_x = (kx * dx) as isize - px;
                        let Some((ox_lo, ox_hi)) = valid_out_range(g.w, g.wo, sx, off_x)
                        else {
                            continue;
                        };
                        let n = ox_hi - ox_lo + 1;
                        for oy in oy_lo..=oy_hi {
                            let iy = (oy * sy) as isize + off_y;
                            let in_row = &x_plane[iy as usize * g.w..][..g.w];
                            let out_row = &mut out_plane[oy * g.wo..][..g.wo];
                            if sx == 1 {
                                let ix0 = (ox_lo as isize + off_x) as usize;
                                let src = &in_row[ix0..ix0 + n];
                                let dst = &mut out_row[ox_lo..ox_lo + n];
                                for (d, s) in dst.iter_mut().zip(src.iter()) {
                                    *d += wv * *s;
                                }
                            } else {
                                for ox in ox_lo..=ox_hi {
                                    let ix = ((ox * sx) as isize + off_x) as usize;
                                    out_row[ox] += wv * in_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn backward_input<T: Scalar>(dy: &[T], w: &[T], g: &Geom) -> Vec<T> {
    let (sy, sx) = g.spec.stride;
    let (py, px) = (g.spec.pad.0 as isize, g.spec.pad.1 as isize);
    let (dly, dlx) = g.spec.dilation;
    let mut dx = vec![T::zero(); g.b * g.ci * g.h * g.w];
    for bi in 0..g.b {
        let dy_img = &dy[bi * g.co * g.ho * g.wo..][..g.co * g.ho * g.wo];
        let dx_img = &mut dx[bi * g.ci * g.h * g.w..][..g.ci * g.h * g.w];
        for c in 0..g.ci {
            let dx_plane = &mut dx_img[c * g.h * g.w..][..g.h * g.w];
            for o in 0..g.co {
                let dy_plane = &dy_img[o * g.ho * g.wo..][..g.ho * g.wo];
                let w_base = (o * g.ci + c) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let off_y = (ky * dly) as isize - py;
                    let Some((oy_lo, oy_hi)) = valid_out_range(g.h, g.ho, sy, off_y) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let wv = w[w_base + ky * g.kw + kx];
                        let off_x = (kx * dlx) as isize - px;
                        let Some((ox_lo, ox_hi)) = valid_out_range(g.w, g.wo, sx, off_x)
                        else {
                            continue;
                        };
                        let n = ox_hi - ox_lo + 1;
                        for oy in oy_lo..=oy_hi {
                            let iy = ((oy * sy) as isize + off_y) as usize;
                            let dy_row = &dy_plane[oy * g.wo..][..g.wo];
                            let dx_row = &mut dx_plane[iy * g.w..][..g.w];
                            if sx == 1 {
                                let ix0 = (ox_lo as isize + off_x) as usize;
                                let dst = &mut dx_row[ix0..ix0 + n];
                                let src = &dy_row[ox_lo..ox_lo + n];
                                for (d, s) in dst.iter_mut().zip(src.iter()) {
                                    *d += wv * *s;
                                }
                            } else {
                                for ox in ox_lo..=ox_hi {
                                    let ix = ((ox * sx) as isize + off_x) as usize;
                                    dx_row[ix] += wv * dy_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn backward_weight<T: Scalar>(dy: &[T], x: &[T], g: &Geom) -> Vec<T> {
    let (sy, sx) = g.spec.stride;
    let (py, px) = (g.spec.pad.0 as isize, g.spec.pad.1 as isize);
    let (dly, dlx) = g.spec.dilation;
    let mut dw = vec![T::zero(); g.co * g.ci * g.kh * g.kw];
    for o in 0..g.co {
        for c in 0..g.ci {
            let w_base = (o * g.ci + c) * g.kh * g.kw;
            for ky in 0..g.kh {
                let off_y = (ky * dly) as isize - py;
                let Some((oy_lo, oy_hi)) = valid_out_range(g.h, g.ho, sy, off_y) else {
                    continue;
                };
                for kx in 0..g.kw {
                    let off_x = (kx * dlx) as isize - px;
                    let Some((ox_lo, ox_hi)) = valid_out_range(g.w, g.wo, sx, off_x) else {
                        continue;
                    };
                    let n = ox_hi - ox_lo + 1;
                    let mut acc = T::zero();
                    for bi in 0..g.b {
                        let dy_plane =
                            &dy[(bi * g.co + o) * g.ho * g.wo..][..g.ho * g.wo];
                        let x_plane = &x[(bi * g.ci + c) * g.h * g.w..][..g.h * g.w];
                        for oy in oy_lo..=oy_hi {
                            let iy = ((oy * sy) as isize + off_y) as usize;
                            let dy_row = &dy_plane[oy * g.wo..][..g.wo];
                            let x_row = &x_plane[iy * g.w..][..g.w];
                            if sx == 1 {
                                let ix0 = (ox_lo as isize + off_x) as usize;
                                let a = &dy_row[ox_lo..ox_lo + n];
                                let b = &x_row[ix0..ix0 + n];
                                for (u, v) in a.iter().zip(b.iter()) {
                                    acc += *u * *v;
                                }
                            } else {
                                for ox in ox_lo..=ox_hi {
                                    let ix = ((ox * sx) as isize + off_x) as usize;
                                    acc += dy_row[ox] * x_row[ix];
                                }
                            }
                        }
                    }
                    dw[w_base + ky * g.kw + kx] = acc;
                }
            }
        }
    }
    dw
}

fn backward_bias<T: Scalar>(dy: &[T], g: &Geom) -> Vec<T> {
    let mut db = vec![T::zero(); g.co];
    for bi in 0..g.b {
        for o in 0..g.co {
            let plane = &dy[(bi * g.co + o) * g.ho * g.wo..][..g.ho * g.wo];
            let mut acc = T::zero();
            for &v in plane {
                acc += v;
            }
            db[o] += acc;
        }
    }
    db
}

/// 2-D convolution of `x: [B, Ci, H, W]` with `w: [Co, Ci, KH, KW]`.
pub fn conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = geometry(x, w, spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.co] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?}, expected [{}]",
                b.shape(),
                g.co
            )));
        }
    }
    let out_data = forward(x.data(), w.data(), bias.map(|b| b.data()), &g);
    let out = Tensor::from_vec(&[g.b, g.co, g.ho, g.wo], out_data)?;
    if tape.is_recording() {
        let (xc, wc) = (x.clone(), w.clone());
        let bias_id = bias.map(|b| b.id());
        tape.record(&out, move |gy, store| {
            let geo = geometry(&xc, &wc, spec).expect("validated in forward");
            let dx = backward_input(gy.data(), wc.data(), &geo);
            store.accumulate(
                xc.id(),
                Tensor::from_vec(xc.shape(), dx).expect("input shape"),
            );
            let dw = backward_weight(gy.data(), xc.data(), &geo);
            store.accumulate(
                wc.id(),
                Tensor::from_vec(wc.shape(), dw).expect("kernel shape"),
            );
            if let Some(bid) = bias_id {
                let db = backward_bias(gy.data(), &geo);
                store.accumulate(bid, Tensor::from_vec(&[geo.co], db).expect("bias shape"));
            }
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{mul, sum_all};
    use crate::tape::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal definition: out[b,o,oy,ox] = bias[o] + sum over c,ky,kx of
    /// x[b,c,oy*sy+ky*dy-py, ox*sx+kx*dx-px] * w[o,c,ky,kx], out-of-bounds
    /// input treated as zero.
    fn oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        spec: Conv2dSpec,
    ) -> Tensor<f64> {
        let [b, ci, h, wd] = x.dims::<4>().unwrap();
        let [co, _, kh, kw] = w.dims::<4>().unwrap();
        let ho = out_extent(h, kh, spec.stride.0, spec.pad.0, spec.dilation.0).unwrap();
        let wo = out_extent(wd, kw, spec.stride.1, spec.pad.1, spec.dilation.1).unwrap();
        let mut out = vec![0.0f64; b * co * ho * wo];
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.map(|t| t.data()[o]).unwrap_or(0.0);
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * spec.stride.0 + ky * spec.dilation.0)
                                        as isize
                                        - spec.pad.0 as isize;
                                    let ix = (ox * spec.stride.1 + kx * spec.dilation.1)
                                        as isize
                                        - spec.pad.1 as isize;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((bi * ci + c) * h + iy as usize) * wd
                                        + ix as usize;
                                    let wi = ((o * ci + c) * kh + ky) * kw + kx;
                                    acc += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        out[((bi * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[b, co, ho, wo], out).unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn all_ones_box_filter_sums_the_window() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&mut Tape::disabled(), &x, &w, None, Conv2dSpec::new(1, 0, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&mut rng, &[2, 3, 5, 7]);
        // Center-one kernel per channel (diagonal over channels).
        let mut w = vec![0.0; 3 * 3 * 3 * 3];
        for c in 0..3 {
            w[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let w = Tensor::from_vec(&[3, 3, 3, 3], w).unwrap();
        let y = conv2d(&mut Tape::disabled(), &x, &w, None, Conv2dSpec::new(1, 1, 1)).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matches_literal_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let specs = [
            Conv2dSpec::new(1, 1, 1),
            Conv2dSpec::new(2, 1, 1),
            Conv2dSpec::new(1, 2, 2),
            Conv2dSpec {
                stride: (2, 1),
                pad: (0, 2),
                dilation: (1, 2),
            },
        ];
        for spec in specs {
            let x = rand_t(&mut rng, &[2, 4, 9, 9]);
            let w = rand_t(&mut rng, &[8, 4, 3, 3]);
            let b = rand_t(&mut rng, &[8]);
            let fast =
                conv2d(&mut Tape::disabled(), &x, &w, Some(&b), spec).unwrap();
            let slow = oracle(&x, &w, Some(&b), spec);
            assert_eq!(fast.shape(), slow.shape());
            assert!(
                fast.max_abs_diff(&slow) < 1e-6,
                "spec {:?}: diff {}",
                spec,
                fast.max_abs_diff(&slow)
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_t(&mut rng, &[1, 3, 5, 6]);
        let w = rand_t(&mut rng, &[4, 3, 3, 3]);
        let b = rand_t(&mut rng, &[4]);
        let spec = Conv2dSpec::new(2, 1, 1);
        // Random projection keeps the scalar loss sensitive to every output.
        let r = rand_t(&mut rng, &[1, 4, 3, 3]);

        let wrt_x = {
            let (w, b, r) = (w.clone(), b.clone(), r.clone());
            move |t: &mut Tape<f64>, v: &Tensor<f64>| {
                let y = conv2d(t, v, &w, Some(&b), spec)?;
                let y = mul(t, &y, &r)?;
                Ok(sum_all(t, &y))
            }
        };
        let wrt_w = {
            let (x, b, r) = (x.clone(), b.clone(), r.clone());
            move |t: &mut Tape<f64>, v: &Tensor<f64>| {
                let y = conv2d(t, &x, v, Some(&b), spec)?;
                let y = mul(t, &y, &r)?;
                Ok(sum_all(t, &y))
            }
        };
        let wrt_b = {
            let (x, w, r) = (x.clone(), w.clone(), r.clone());
            move |t: &mut Tape<f64>, v: &Tensor<f64>| {
                let y = conv2d(t, &x, &w, Some(v), spec)?;
                let y = mul(t, &y, &r)?;
                Ok(sum_all(t, &y))
            }
        };
        assert!(grad_check(&wrt_x, &x, 1e-4).unwrap() < 1e-4);
        assert!(grad_check(&wrt_w, &w, 1e-4).unwrap() < 1e-4);
        assert!(grad_check(&wrt_b, &b, 1e-4).unwrap() < 1e-4);
    }

    #[test]
    fn rejects_channel_mismatch_and_undersized_input() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[2, 4, 3, 3]);
        assert!(conv2d(&mut Tape::disabled(), &x, &w, None, Conv2dSpec::new(1, 1, 1)).is_err());
        let w = Tensor::<f64>::zeros(&[2, 3, 7, 7]);
        assert!(conv2d(&mut Tape::disabled(), &x, &w, None, Conv2dSpec::new(1, 0, 1)).is_err());
    }
}
