use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::conv2d::{out_extent, valid_out_range};

/// Geometry of a 3-D convolution over `[B, C, D, H, W]` input.
#[derive(Clone, Copy, Debug)]
pub struct Conv3dSpec {
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
}

impl Conv3dSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        Conv3dSpec {
            stride: (stride, stride, stride),
            pad: (pad, pad, pad),
        }
    }
}

struct Geom {
    b: usize,
    ci: usize,
    d: usize,
    h: usize,
    w: usize,
    co: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    dd: usize,
    hh: usize,
    ww: usize,
    spec: Conv3dSpec,
}

impl Geom {
    fn in_vol(&self) -> usize {
        self.d * self.h * self.w
    }
    fn out_vol(&self) -> usize {
        self.dd * self.hh * self.ww
    }
}

fn geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: Conv3dSpec) -> Result<Geom> {
    let [b, ci, d, h, wd] = x.dims::<5>()?;
    let [co, wci, kd, kh, kw] = w.dims::<5>()?;
    if wci != ci {
        return Err(Error::shape(format!(
            "conv3d: input has {} channels, kernel expects {}",
            ci, wci
        )));
    }
    let dd = out_extent(d, kd, spec.stride.0, spec.pad.0, 1)?;
    let hh = out_extent(h, kh, spec.stride.1, spec.pad.1, 1)?;
    let ww = out_extent(wd, kw, spec.stride.2, spec.pad.2, 1)?;
    Ok(Geom {
        b,
        ci,
        d,
        h,
        w: wd,
        co,
        kd,
        kh,
        kw,
        dd,
        hh,
        ww,
        spec,
    })
}

fn forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &Geom) -> Vec<T> {
    let (sz, sy, sx) = g.spec.stride;
    let (pz, py, px) = (
        g.spec.pad.0 as isize,
        g.spec.pad.1 as isize,
        g.spec.pad.2 as isize,
    );
    let mut out = vec![T::zero(); g.b * g.co * g.out_vol()];
    for bi in 0..g.b {
        let x_img = &x[bi * g.ci * g.in_vol()..][..g.ci * g.in_vol()];
        let out_img = &mut out[bi * g.co * g.out_vol()..][..g.co * g.out_vol()];
        for o in 0..g.co {
            let out_vol = &mut out_img[o * g.out_vol()..][..g.out_vol()];
            if let Some(bv) = bias {
                out_vol.fill(bv[o]);
            }
            for c in 0..g.ci {
                let x_vol = &x_img[c * g.in_vol()..][..g.in_vol()];
                let w_base = (o * g.ci + c) * g.kd * g.kh * g.kw;
                for kz in 0..g.kd {
                    let off_z = kz as isize - pz;
                    let Some((oz_lo, oz_hi)) = valid_out_range(g.d, g.dd, sz, off_z) else {
                        continue;
                    };
                    for ky in 0..g.kh {
                        let off_y = ky as isize - py;
                        let Some((oy_lo, oy_hi)) = valid_out_range(g.h, g.hh, sy, off_y)
                        else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let wv = w[w_base + (kz * g.kh + ky) * g.kw + kx];
                            let off_x = kx as isize - px;
                            let Some((ox_lo, ox_hi)) =
                                valid_out_range(g.w, g.ww, sx, off_x)
                            else {
                                continue;
                            };
                            let n = ox_hi - ox_lo + 1;
                            for oz in oz_lo..=oz_hi {
                                let iz = ((oz * sz) as isize + off_z) as usize;
                                for oy in oy_lo..=oy_hi {
                                    let iy = ((oy * sy) as isize + off_y) as usize;
                                    let in_row = &x_vol[(iz * g.h + iy) * g.w..][..g.w];
                                    let out_row =
                                        &mut out_vol[(oz * g.hh + oy) * g.ww..][..g.ww];
                                    if sx == 1 {
                                        let ix0 = (ox_lo as isize + off_x) as usize;
                                        let src = &in_row[ix0..ix0 + n];
                                        let dst = &mut out_row[ox_lo..ox_lo + n];
                                        for (d, s) in dst.iter_mut().zip(src.iter()) {
                                            *d += wv * *s;
                                        }
                                    } else {
                                        for ox in ox_lo..=ox_hi {
                                            let ix =
                                                ((ox * sx) as isize + off_x) as usize;
                                            out_row[ox] += wv * in_row[ix];
                                        }
                                    }
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
    let (sz, sy, sx) = g.spec.stride;
    let (pz, py, px) = (
        g.spec.pad.0 as isize,
        g.spec.pad.1 as isize,
        g.spec.pad.2 as isize,
    );
    let mut dx = vec![T::zero(); g.b * g.ci * g.in_vol()];
    for bi in 0..g.b {
        let dy_img = &dy[bi * g.co * g.out_vol()..][..g.co * g.out_vol()];
        let dx_img = &mut dx[bi * g.ci * g.in_vol()..][..g.ci * g.in_vol()];
        for c in 0..g.ci {
            let dx_vol = &mut dx_img[c * g.in_vol()..][..g.in_vol()];
            for o in 0..g.co {
                let dy_vol = &dy_img[o * g.out_vol()..][..g.out_vol()];
                let w_base = (o * g.ci + c) * g.kd * g.kh * g.kw;
                for kz in 0..g.kd {
                    let off_z = kz as isize - pz;
                    let Some((oz_lo, oz_hi)) = valid_out_range(g.d, g.dd, sz, off_z) else {
                        continue;
                    };
                    for ky in 0..g.kh {
                        let off_y = ky as isize - py;
                        let Some((oy_lo, oy_hi)) = valid_out_range(g.h, g.hh, sy, off_y)
                        else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let wv = w[w_base + (kz * g.kh + ky) * g.kw + kx];
                            let off_x = kx as isize - px;
                            let Some((ox_lo, ox_hi)) =
                                valid_out_range(g.w, g.ww, sx, off_x)
                            else {
                                continue;
                            };
                            let n = ox_hi - ox_lo + 1;
                            for oz in oz_lo..=oz_hi {
                                let iz = ((oz * sz) as isize + off_z) as usize;
                                for oy in oy_lo..=oy_hi {
                                    let iy = ((oy * sy) as isize + off_y) as usize;
                                    let dy_row =
                                        &dy_vol[(oz * g.hh + oy) * g.ww..][..g.ww];
                                    let dx_row =
                                        &mut dx_vol[(iz * g.h + iy) * g.w..][..g.w];
                                    if sx == 1 {
                                        let ix0 = (ox_lo as isize + off_x) as usize;
                                        let dst = &mut dx_row[ix0..ix0 + n];
                                        let src = &dy_row[ox_lo..ox_lo + n];
                                        for (d, s) in dst.iter_mut().zip(src.iter()) {
                                            *d += wv * *s;
                                        }
                                    } else {
                                        for ox in ox_lo..=ox_hi {
                                            let ix =
                                                ((ox * sx) as isize + off_x) as usize;
                                            dx_row[ix] += wv * dy_row[ox];
                                        }
                                    }
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
    let (sz, sy, sx) = g.spec.stride;
    let (pz, py, px) = (
        g.spec.pad.0 as isize,
        g.spec.pad.1 as isize,
        g.spec.pad.2 as isize,
    );
    let mut dw = vec![T::zero(); g.co * g.ci * g.kd * g.kh * g.kw];
    for o in 0..g.co {
        for c in 0..g.ci {
            let w_base = (o * g.ci + c) * g.kd * g.kh * g.kw;
            for kz in 0..g.kd {
                let off_z = kz as isize - pz;
                let Some((oz_lo, oz_hi)) = valid_out_range(g.d, g.dd, sz, off_z) else {
                    continue;
                };
                for ky in 0..g.kh {
                    let off_y = ky as isize - py;
                    let Some((oy_lo, oy_hi)) = valid_out_range(g.h, g.hh, sy, off_y) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let off_x = kx as isize - px;
                        let Some((ox_lo, ox_hi)) = valid_out_range(g.w, g.ww, sx, off_x)
                        else {
                            continue;
                        };
                        let n = ox_hi - ox_lo + 1;
                        let mut acc = T::zero();
                        for bi in 0..g.b {
                            let dy_vol =
                                &dy[(bi * g.co + o) * g.out_vol()..][..g.out_vol()];
                            let x_vol = &x[(bi * g.ci + c) * g.in_vol()..][..g.in_vol()];
                            for oz in oz_lo..=oz_hi {
                                let iz = ((oz * sz) as isize + off_z) as usize;
                                for oy in oy_lo..=oy_hi {
                                    let iy = ((oy * sy) as isize + off_y) as usize;
                                    let dy_row =
                                        &dy_vol[(oz * g.hh + oy) * g.ww..][..g.ww];
                                    let x_row = &x_vol[(iz * g.h + iy) * g.w..][..g.w];
                                    if sx == 1 {
                                        let ix0 = (ox_lo as isize + off_x) as usize;
                                        let a = &dy_row[ox_lo..ox_lo + n];
                                        let b = &x_row[ix0..ix0 + n];
                                        for (u, v) in a.iter().zip(b.iter()) {
                                            acc += *u * *v;
                                        }
                                    } else {
                                        for ox in ox_lo..=ox_hi {
                                            let ix =
                                                ((ox * sx) as isize + off_x) as usize;
                                            acc += dy_row[ox] * x_row[ix];
                                        }
                                    }
                                }
                            }
                        }
                        dw[w_base + (kz * g.kh + ky) * g.kw + kx] = acc;
                    }
                }
            }
        }
    }
    dw
}

fn backward_bias<T: Scalar>(dy: &[T], co: usize, batch: usize, vol: usize) -> Vec<T> {
    let mut db = vec![T::zero(); co];
    for bi in 0..batch {
        for o in 0..co {
            let plane = &dy[(bi * co + o) * vol..][..vol];
            let mut acc = T::zero();
            for &v in plane {
                acc += v;
            }
            db[o] += acc;
        }
    }
    db
}

/// 3-D convolution of `x: [B, Ci, D, H, W]` with `w: [Co, Ci, KD, KH, KW]`.
pub fn conv3d<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv3dSpec,
) -> Result<Tensor<T>> {
    let g = geometry(x, w, spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.co] {
            return Err(Error::shape(format!(
                "conv3d: bias shape {:?}, expected [{}]",
                b.shape(),
                g.co
            )));
        }
    }
    let out_data = forward(x.data(), w.data(), bias.map(|b| b.data()), &g);
    let out = Tensor::from_vec(&[g.b, g.co, g.dd, g.hh, g.ww], out_data)?;
    if tape.is_recording() {
        let (xc, wc) = (x.clone(), w.clone());
        let bias_id = bias.map(|b| b.id());
        tape.record(&out, move |gy, store| {
            let geo = geometry(&xc, &wc, spec).expect("validated in forward");
            store.accumulate(
                xc.id(),
                Tensor::from_vec(xc.shape(), backward_input(gy.data(), wc.data(), &geo))
                    .expect("input shape"),
            );
            store.accumulate(
                wc.id(),
                Tensor::from_vec(wc.shape(), backward_weight(gy.data(), xc.data(), &geo))
                    .expect("kernel shape"),
            );
            if let Some(bid) = bias_id {
                let db = backward_bias(gy.data(), geo.co, geo.b, geo.out_vol());
                store.accumulate(bid, Tensor::from_vec(&[geo.co], db).expect("bias shape"));
            }
        });
    }
    Ok(out)
}

// --- Transposed convolution -------------------------------------------------

struct TGeom {
    b: usize,
    ci: usize,
    d: usize,
    h: usize,
    w: usize,
    co: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    dd: usize,
    hh: usize,
    ww: usize,
    spec: Conv3dSpec,
}

impl TGeom {
    fn in_vol(&self) -> usize {
        self.d * self.h * self.w
    }
    fn out_vol(&self) -> usize {
        self.dd * self.hh * self.ww
    }
}

fn t_out_extent(n_in: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let grown = (n_in - 1) * stride + k;
    if grown < 2 * pad + 1 {
        return Err(Error::shape(format!(
            "conv3d_transposed: extent {} too small for kernel {} pad {}",
            n_in, k, pad
        )));
    }
    Ok(grown - 2 * pad)
}

fn t_geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: Conv3dSpec) -> Result<TGeom> {
    let [b, ci, d, h, wd] = x.dims::<5>()?;
    let [wci, co, kd, kh, kw] = w.dims::<5>()?;
    if wci != ci {
        return Err(Error::shape(format!(
            "conv3d_transposed: input has {} channels, kernel expects {}",
            ci, wci
        )));
    }
    let dd = t_out_extent(d, kd, spec.stride.0, spec.pad.0)?;
    let hh = t_out_extent(h, kh, spec.stride.1, spec.pad.1)?;
    let ww = t_out_extent(wd, kw, spec.stride.2, spec.pad.2)?;
    Ok(TGeom {
        b,
        ci,
        d,
        h,
        w: wd,
        co,
        kd,
        kh,
        kw,
        dd,
        hh,
        ww,
        spec,
    })
}

/// Input index range `[lo, hi]` such that `i*stride + offset` stays inside
/// `[0, n_out)`.
#[inline]
fn valid_in_range(n_out: usize, n_in: usize, stride: usize, offset: isize) -> Option<(usize, usize)> {
    valid_out_range(n_out, n_in, stride, offset)
}

fn t_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &TGeom) -> Vec<T> {
    let (sz, sy, sx) = g.spec.stride;
    let (pz, py, px) = (
        g.spec.pad.0 as isize,
        g.spec.pad.1 as isize,
        g.spec.pad.2 as isize,
    );
    let mut out = vec![T::zero(); g.b * g.co * g.out_vol()];
    for bi in 0..g.b {
        let x_img = &x[bi * g.ci * g.in_vol()..][..g.ci * g.in_vol()];
        let out_img = &mut out[bi * g.co * g.out_vol()..][..g.co * g.out_vol()];
        for o in 0..g.co {
            let out_vol = &mut out_img[o * g.out_vol()..][..g.out_vol()];
            if let Some(bv) = bias {
                out_vol.fill(bv[o]);
            }
            for c in 0..g.ci {
                let x_vol = &x_img[c * g.in_vol()..][..g.in_vol()];
                let w_base = (c * g.co + o) * g.kd * g.kh * g.kw;
                for kz in 0..g.kd {
                    let off_z = kz as isize - pz;
                    let Some((iz_lo, iz_hi)) = valid_in_range(g.dd, g.d, sz, off_z) else {
                        continue;
                    };
                    for ky in 0..g.kh {
                        let off_y = ky as isize - py;
                        let Some((iy_lo, iy_hi)) = valid_in_range(g.hh, g.h, sy, off_y)
                        else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let wv = w[w_base + (kz * g.kh + ky) * g.kw + kx];
                            let off_x = kx as isize - px;
                            let Some((ix_lo, ix_hi)) =
                                valid_in_range(g.ww, g.w, sx, off_x)
                            else {
                                continue;
                            };
                            for iz in iz_lo..=iz_hi {
                                let oz = ((iz * sz) as isize + off_z) as usize;
                                for iy in iy_lo..=iy_hi {
                                    let oy = ((iy * sy) as isize + off_y) as usize;
                                    let x_row = &x_vol[(iz * g.h + iy) * g.w..][..g.w];
                                    let out_row =
                                        &mut out_vol[(oz * g.hh + oy) * g.ww..][..g.ww];
                                    for ix in ix_lo..=ix_hi {
                                        let ox = ((ix * sx) as isize + off_x) as usize;
                                        out_row[ox] += wv * x_row[ix];
                                    }
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

fn t_backward_input<T: Scalar>(dy: &[T], w: &[T], g: &TGeom) -> Vec<T> {
    let (sz, sy, sx) = g.spec.stride;
    let (pz, py, px) = (
        g.spec.pad.0 as isize,
        g.spec.pad.1 as isize,
        g.spec.pad.2 as isize,
    );
    let mut dx = vec![T::zero(); g.b * g.ci * g.in_vol()];
    for bi in 0..g.b {
        let dy_img = &dy[bi * g.co * g.out_vol()..][..g.co * g.out_vol()];
        let dx_img = &mut dx[bi * g.ci * g.in_vol()..][..g.ci * g.in_vol()];
        for c in 0..g.ci {
            let dx_vol = &mut dx_img[c * g.in_vol()..][..g.in_vol()];
            for o in 0..g.co {
                let dy_vol = &dy_img[o * g.out_vol()..][..g.out_vol()];
                let w_base = (c * g.co + o) * g.kd * g.kh * g.kw;
                for kz in 0..g.kd {
                    let off_z = kz as isize - pz;
                    let Some((iz_lo, iz_hi)) = valid_in_range(g.dd, g.d, sz, off_z) else {
                        continue;
                    };
                    for ky in 0..g.kh {
                        let off_y = ky as isize - py;
                        let Some((iy_lo, iy_hi)) = valid_in_range(g.hh, g.h, sy, off_y)
                        else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let wv = w[w_base + (kz * g.kh + ky) * g.kw + kx];
                            let off_x = kx as isize - px;
                            let Some((ix_lo, ix_hi)) =
                                valid_in_range(g.ww, g.w, sx, off_x)
                            else {
                                continue;
                            };
                            for iz in iz_lo..=iz_hi {
                                let oz = ((iz * sz) as isize + off_z) as usize;
                                for iy in iy_lo..=iy_hi {
                                    let oy = ((iy * sy) as isize + off_y) as usize;
                                    let dy_row =
                                        &dy_vol[(oz * g.hh + oy) * g.ww..][..g.ww];
                                    let dx_row =
                                        &mut dx_vol[(iz * g.h + iy) * g.w..][..g.w];
                                    for ix in ix_lo..=ix_hi {
                                        let ox = ((ix * sx) as isize + off_x) as usize;
                                        dx_row[ix] += wv * dy_row[ox];
                                    }
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

fn t_backward_weight<T: Scalar>(dy: &[T], x: &[T], g: &TGeom) -> Vec<T> {
    let (sz, sy, sx) = g.spec.stride;
    let (pz, py, px) = (
        g.spec.pad.0 as isize,
        g.spec.pad.1 as isize,
        g.spec.pad.2 as isize,
    );
    let mut dw = vec![T::zero(); g.ci * g.co * g.kd * g.kh * g.kw];
    for c in 0..g.ci {
        for o in 0..g.co {
            let w_base = (c * g.co + o) * g.kd * g.kh * g.kw;
            for kz in 0..g.kd {
                let off_z = kz as isize - pz;
                let Some((iz_lo, iz_hi)) = valid_in_range(g.dd, g.d, sz, off_z) else {
                    continue;
                };
                for ky in 0..g.kh {
                    let off_y = ky as isize - py;
                    let Some((iy_lo, iy_hi)) = valid_in_range(g.hh, g.h, sy, off_y) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let off_x = kx as isize - px;
                        let Some((ix_lo, ix_hi)) = valid_in_range(g.ww, g.w, sx, off_x)
                        else {
                            continue;
                        };
                        let mut acc = T::zero();
                        for bi in 0..g.b {
                            let dy_vol =
                                &dy[(bi * g.co + o) * g.out_vol()..][..g.out_vol()];
                            let x_vol = &x[(bi * g.ci + c) * g.in_vol()..][..g.in_vol()];
                            for iz in iz_lo..=iz_hi {
                                let oz = ((iz * sz) as isize + off_z) as usize;
                                for iy in iy_lo..=iy_hi {
                                    let oy = ((iy * sy) as isize + off_y) as usize;
                                    let dy_row =
                                        &dy_vol[(oz * g.hh + oy) * g.ww..][..g.ww];
                                    let x_row = &x_vol[(iz * g.h + iy) * g.w..][..g.w];
                                    for ix in ix_lo..=ix_hi {
                                        let ox = ((ix * sx) as isize + off_x) as usize;
                                        acc += dy_row[ox] * x_row[ix];
                                    }
                                }
                            }
                        }
                        dw[w_base + (kz * g.kh + ky) * g.kw + kx] = acc;
                    }
                }
            }
        }
    }
    dw
}

/// Transposed 3-D convolution (fractionally strided) of `x: [B, Ci, D, H, W]`
/// with `w: [Ci, Co, KD, KH, KW]`. With kernel 4, stride 2, pad 1 every
/// output extent is exactly double the input extent, and the map is the
/// adjoint of [`conv3d`] with the same geometry.
pub fn conv3d_transposed<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv3dSpec,
) -> Result<Tensor<T>> {
    let g = t_geometry(x, w, spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.co] {
            return Err(Error::shape(format!(
                "conv3d_transposed: bias shape {:?}, expected [{}]",
                b.shape(),
                g.co
            )));
        }
    }
    let out_data = t_forward(x.data(), w.data(), bias.map(|b| b.data()), &g);
    let out = Tensor::from_vec(&[g.b, g.co, g.dd, g.hh, g.ww], out_data)?;
    if tape.is_recording() {
        let (xc, wc) = (x.clone(), w.clone());
        let bias_id = bias.map(|b| b.id());
        tape.record(&out, move |gy, store| {
            let geo = t_geometry(&xc, &wc, spec).expect("validated in forward");
            store.accumulate(
                xc.id(),
                Tensor::from_vec(xc.shape(), t_backward_input(gy.data(), wc.data(), &geo))
                    .expect("input shape"),
            );
            store.accumulate(
                wc.id(),
                Tensor::from_vec(wc.shape(), t_backward_weight(gy.data(), xc.data(), &geo))
                    .expect("kernel shape"),
            );
            if let Some(bid) = bias_id {
                let db = backward_bias(gy.data(), geo.co, geo.b, geo.out_vol());
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

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn oracle3d(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        spec: Conv3dSpec,
    ) -> Tensor<f64> {
        let [b, ci, d, h, wd] = x.dims::<5>().unwrap();
        let [co, _, kd, kh, kw] = w.dims::<5>().unwrap();
        let dd = out_extent(d, kd, spec.stride.0, spec.pad.0, 1).unwrap();
        let hh = out_extent(h, kh, spec.stride.1, spec.pad.1, 1).unwrap();
        let ww = out_extent(wd, kw, spec.stride.2, spec.pad.2, 1).unwrap();
        let mut out = vec![0.0f64; b * co * dd * hh * ww];
        for bi in 0..b {
            for o in 0..co {
                for oz in 0..dd {
                    for oy in 0..hh {
                        for ox in 0..ww {
                            let mut acc = bias.map(|t| t.data()[o]).unwrap_or(0.0);
                            for c in 0..ci {
                                for kz in 0..kd {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let iz = (oz * spec.stride.0 + kz) as isize
                                                - spec.pad.0 as isize;
                                            let iy = (oy * spec.stride.1 + ky) as isize
                                                - spec.pad.1 as isize;
                                            let ix = (ox * spec.stride.2 + kx) as isize
                                                - spec.pad.2 as isize;
                                            if iz < 0
                                                || iz >= d as isize
                                                || iy < 0
                                                || iy >= h as isize
                                                || ix < 0
                                                || ix >= wd as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((bi * ci + c) * d + iz as usize) * h
                                                + iy as usize)
                                                * wd
                                                + ix as usize;
                                            let wi = (((o * ci + c) * kd + kz) * kh + ky)
                                                * kw
                                                + kx;
                                            acc += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            out[(((bi * co + o) * dd + oz) * hh + oy) * ww + ox] = acc;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[b, co, dd, hh, ww], out).unwrap()
    }

    #[test]
    fn ones_cube_sums_27_elements() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3, 3], 1.0);
        let y = conv3d(&mut Tape::disabled(), &x, &w, None, Conv3dSpec::new(1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data()[0], 27.0);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, &[1, 2, 4, 5, 6]);
        let mut w = vec![0.0; 2 * 2 * 27];
        for c in 0..2 {
            // center tap of the c->c kernel
            w[(c * 2 + c) * 27 + 13] = 1.0;
        }
        let w = Tensor::from_vec(&[2, 2, 3, 3, 3], w).unwrap();
        let y = conv3d(&mut Tape::disabled(), &x, &w, None, Conv3dSpec::new(1, 1)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matches_literal_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for spec in [Conv3dSpec::new(1, 1), Conv3dSpec::new(2, 1)] {
            let x = rand_t(&mut rng, &[2, 3, 6, 7, 5]);
            let w = rand_t(&mut rng, &[4, 3, 3, 3, 3]);
            let b = rand_t(&mut rng, &[4]);
            let fast = conv3d(&mut Tape::disabled(), &x, &w, Some(&b), spec).unwrap();
            let slow = oracle3d(&x, &w, Some(&b), spec);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-6);
        }
    }

    #[test]
    fn transposed_doubles_extents_with_k4_s2_p1() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3, 4, 5]);
        let w = Tensor::<f64>::zeros(&[2, 3, 4, 4, 4]);
        let y =
            conv3d_transposed(&mut Tape::disabled(), &x, &w, None, Conv3dSpec::new(2, 1))
                .unwrap();
        assert_eq!(y.shape(), &[1, 3, 6, 8, 10]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transposed_impulse_scatters_the_kernel() {
        // A single unit impulse at input position (1,1,1) must write the
        // kernel stamp at output positions 2*q + k - 1.
        let mut xd = vec![0.0; 3 * 3 * 3];
        xd[(1 * 3 + 1) * 3 + 1] = 1.0;
        let x = Tensor::from_vec(&[1, 1, 3, 3, 3], xd).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = rand_t(&mut rng, &[1, 1, 4, 4, 4]);
        let y =
            conv3d_transposed(&mut Tape::disabled(), &x, &w, None, Conv3dSpec::new(2, 1))
                .unwrap();
        assert_eq!(y.shape(), &[1, 1, 6, 6, 6]);
        for kz in 0..4 {
            for ky in 0..4 {
                for kx in 0..4 {
                    let (oz, oy, ox) = (2 + kz - 1, 2 + ky - 1, 2 + kx - 1);
                    let got = y.data()[(oz * 6 + oy) * 6 + ox];
                    let want = w.data()[(kz * 4 + ky) * 4 + kx];
                    assert_eq!(got, want);
                }
            }
        }
    }

    #[test]
    fn transposed_is_adjoint_of_conv3d() {
        // <conv3d_transposed(x; W), u> == <x, conv3d(u; V)> where V is W with
        // the channel axes swapped. Equivalently conv3d_transposed(x) equals
        // the tape gradient of sum(conv3d(u; V) * x) with respect to u.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = rand_t(&mut rng, &[1, 2, 3, 4, 4]);
        let w = rand_t(&mut rng, &[2, 3, 4, 4, 4]); // [Ci=2, Co=3, ...]
        let spec = Conv3dSpec::new(2, 1);
        let t_out =
            conv3d_transposed(&mut Tape::disabled(), &x, &w, None, spec).unwrap();

        // V[o=2ch, i=3ch] = W viewed as a conv kernel mapping 3ch -> 2ch.
        let mut v = vec![0.0; 2 * 3 * 64];
        for c in 0..2 {
            for o in 0..3 {
                for k in 0..64 {
                    v[(c * 3 + o) * 64 + k] = w.data()[(c * 3 + o) * 64 + k];
                }
            }
        }
        let v = Tensor::from_vec(&[2, 3, 4, 4, 4], v).unwrap();

        let u = rand_t(&mut rng, t_out.shape());
        let mut tape = Tape::new();
        let conv_u = conv3d(&mut tape, &u, &v, None, spec).unwrap();
        assert_eq!(conv_u.shape(), x.shape());
        let prod = mul(&mut tape, &conv_u, &x).unwrap();
        let loss = sum_all(&mut tape, &prod);
        let store = tape.backward(&loss).unwrap();
        let grad_u = store.get(&u).unwrap();
        assert!(
            t_out.max_abs_diff(grad_u) < 1e-6,
            "duality violated: {}",
            t_out.max_abs_diff(grad_u)
        );
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = rand_t(&mut rng, &[1, 2, 4, 5, 4]);
        let w = rand_t(&mut rng, &[3, 2, 3, 3, 3]);
        let b = rand_t(&mut rng, &[3]);
        for spec in [Conv3dSpec::new(1, 1), Conv3dSpec::new(2, 1)] {
            let shape_probe =
                conv3d(&mut Tape::disabled(), &x, &w, Some(&b), spec).unwrap();
            let r = rand_t(&mut rng, shape_probe.shape());
            let wrt_x = {
                let (w, b, r) = (w.clone(), b.clone(), r.clone());
                move |t: &mut Tape<f64>, v: &Tensor<f64>| {
                    let y = conv3d(t, v, &w, Some(&b), spec)?;
                    let y = mul(t, &y, &r)?;
                    Ok(sum_all(t, &y))
                }
            };
            let wrt_w = {
                let (x, b, r) = (x.clone(), b.clone(), r.clone());
                move |t: &mut Tape<f64>, v: &Tensor<f64>| {
                    let y = conv3d(t, &x, v, Some(&b), spec)?;
                    let y = mul(t, &y, &r)?;
                    Ok(sum_all(t, &y))
                }
            };
            assert!(grad_check(&wrt_x, &x, 1e-4).unwrap() < 1e-4);
            assert!(grad_check(&wrt_w, &w, 1e-4).unwrap() < 1e-4);
        }
    }

    #[test]
    fn transposed_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x = rand_t(&mut rng, &[1, 2, 3, 3, 4]);
        let w = rand_t(&mut rng, &[2, 2, 4, 4, 4]);
        let b = rand_t(&mut rng, &[2]);
        let spec = Conv3dSpec::new(2, 1);
        let probe =
            conv3d_transposed(&mut Tape::disabled(), &x, &w, Some(&b), spec).unwrap();
        let r = rand_t(&mut rng, probe.shape());
        let wrt_x = {
            let (w, b, r) = (w.clone(), b.clone(), r.clone());
            move |t: &mut Tape<f64>, v: &Tensor<f64>| {
                let y = conv3d_transposed(t, v, &w, Some(&b), spec)?;
                let y = mul(t, &y, &r)?;
                Ok(sum_all(t, &y))
            }
        };
        let wrt_w = {
            let (x, b, r) = (x.clone(), b.clone(), r.clone());
            move |t: &mut Tape<f64>, v: &Tensor<f64>| {
                let y = conv3d_transposed(t, &x, v, Some(&b), spec)?;
                let y = mul(t, &y, &r)?;
                Ok(sum_all(t, &y))
            }
        };
        let wrt_b = {
            let (x, w, r) = (x.clone(), w.clone(), r.clone());
            move |t: &mut Tape<f64>, v: &Tensor<f64>| {
                let y = conv3d_transposed(t, &x, &w, Some(v), spec)?;
                let y = mul(t, &y, &r)?;
                Ok(sum_all(t, &y))
            }
        };
        assert!(grad_check(&wrt_x, &x, 1e-4).unwrap() < 1e-4);
        assert!(grad_check(&wrt_w, &w, 1e-4).unwrap() < 1e-4);
        assert!(grad_check(&wrt_b, &b, 1e-4).unwrap() < 1e-4);
    }
}
