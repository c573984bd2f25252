//! Matching-cost volumes. Four constructions over quarter-resolution feature
//! maps, each producing `[B, Cv, Dq, H, W]` where slice `d` compares the left
//! pixel `(x, y)` with the right pixel `(x - d, y)`. Entries whose right
//! partner falls outside the frame are exactly zero.
//!
//! [`oracle`] is a deliberately naive scalar transcription of the same
//! definitions, kept free of the builders' loop structure so the two can
//! check each other.

use crate::error::{Error, Result};
use crate::scalar::{cast, cast_usize, Scalar};
use crate::tape::Tape;
use crate::tensor::{same_shape, Tensor};

/// Channel count of the compressed features consumed by the correlation and
/// concatenation volumes.
pub const CORR_CHANNELS: usize = 12;

/// Floor for the cosine denominator.
const NORM_EPS: f64 = 1e-9;

/// The four volume constructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeKind {
    /// Group-wise correlation by dot product.
    GwcDot,
    /// Group-wise squared difference.
    GwcSub,
    /// Cosine similarity of the compressed features, one channel.
    NormCorr,
    /// Left and right compressed features stacked, 24 channels.
    Concat,
}

impl VolumeKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gwc-dot" => Ok(VolumeKind::GwcDot),
            "gwc-sub" => Ok(VolumeKind::GwcSub),
            "norm-corr" => Ok(VolumeKind::NormCorr),
            "concat" => Ok(VolumeKind::Concat),
            other => Err(Error::config(format!(
                "unknown volume kind \"{}\" (expected gwc-dot, gwc-sub, norm-corr, or concat)",
                other
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VolumeKind::GwcDot => "gwc-dot",
            VolumeKind::GwcSub => "gwc-sub",
            VolumeKind::NormCorr => "norm-corr",
            VolumeKind::Concat => "concat",
        }
    }

    /// Channel count of the produced volume.
    pub fn channels(self, ng: usize) -> usize {
        match self {
            VolumeKind::GwcDot | VolumeKind::GwcSub => ng,
            VolumeKind::NormCorr => 1,
            VolumeKind::Concat => 2 * CORR_CHANNELS,
        }
    }
}

struct Geom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn geometry<T: Scalar>(fl: &Tensor<T>, fr: &Tensor<T>, dq: usize) -> Result<Geom> {
    same_shape(fl, fr, "cost volume features")?;
    let [b, c, h, w] = fl.dims::<4>()?;
    if dq == 0 {
        return Err(Error::shape("cost volume: disparity count must be >= 1"));
    }
    Ok(Geom { b, c, h, w })
}

fn check_gwc(geom: &Geom, ng: usize) -> Result<()> {
    if ng == 0 || geom.c % ng != 0 {
        return Err(Error::shape(format!(
            "group-wise volume: {} channels not divisible into {} groups",
            geom.c, ng
        )));
    }
    Ok(())
}

fn check_corr(geom: &Geom, what: &str) -> Result<()> {
    if geom.c != CORR_CHANNELS {
        return Err(Error::shape(format!(
            "{}: expected {} compressed channels, got {}",
            what, CORR_CHANNELS, geom.c
        )));
    }
    Ok(())
}

/// Group-wise correlation volume, `(Ng/Nc) * <fl_g(x,y), fr_g(x-d,y)>`.
pub fn build_gwc_dot<T: Scalar>(
    tape: &mut Tape<T>,
    fl: &Tensor<T>,
    fr: &Tensor<T>,
    ng: usize,
    dq: usize,
) -> Result<Tensor<T>> {
    let g = geometry(fl, fr, dq)?;
    check_gwc(&g, ng)?;
    let per_group = g.c / ng;
    let scale = cast_usize::<T>(ng) / cast_usize::<T>(g.c);
    let plane = g.h * g.w;

    let mut out = vec![T::zero(); g.b * ng * dq * plane];
    for bi in 0..g.b {
        for grp in 0..ng {
            for d in 0..dq.min(g.w) {
                for y in 0..g.h {
                    let out_row =
                        &mut out[(((bi * ng + grp) * dq + d) * g.h + y) * g.w..][..g.w];
                    for c in grp * per_group..(grp + 1) * per_group {
                        let fl_row = &fl.data()[((bi * g.c + c) * g.h + y) * g.w..][..g.w];
                        let fr_row = &fr.data()[((bi * g.c + c) * g.h + y) * g.w..][..g.w];
                        for x in d..g.w {
                            out_row[x] += fl_row[x] * fr_row[x - d];
                        }
                    }
                    for x in d..g.w {
                        out_row[x] *= scale;
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[g.b, ng, dq, g.h, g.w], out)?;

    if tape.is_recording() {
        let (flc, frc) = (fl.clone(), fr.clone());
        tape.record(&out, move |gy, store| {
            let gd = gy.data();
            let mut dfl = vec![T::zero(); flc.numel()];
            let mut dfr = vec![T::zero(); frc.numel()];
            let (b, c, h, w) = (
                flc.shape()[0],
                flc.shape()[1],
                flc.shape()[2],
                flc.shape()[3],
            );
            let per_group = c / ng;
            let scale = cast_usize::<T>(ng) / cast_usize::<T>(c);
            for bi in 0..b {
                for grp in 0..ng {
                    for d in 0..dq.min(w) {
                        for y in 0..h {
                            let g_row =
                                &gd[(((bi * ng + grp) * dq + d) * h + y) * w..][..w];
                            for ch in grp * per_group..(grp + 1) * per_group {
                                let base = ((bi * c + ch) * h + y) * w;
                                for x in d..w {
                                    let gv = scale * g_row[x];
                                    dfl[base + x] += gv * frc.data()[base + x - d];
                                    dfr[base + x - d] += gv * flc.data()[base + x];
                                }
                            }
                        }
                    }
                }
            }
            store.accumulate(flc.id(), Tensor::from_vec(flc.shape(), dfl).expect("fl shape"));
            store.accumulate(frc.id(), Tensor::from_vec(frc.shape(), dfr).expect("fr shape"));
        });
    }
    Ok(out)
}

/// Group-wise difference volume, `(Ng/Nc) * |fl_g(x,y) - fr_g(x-d,y)|^2`.
pub fn build_gwc_sub<T: Scalar>(
    tape: &mut Tape<T>,
    fl: &Tensor<T>,
    fr: &Tensor<T>,
    ng: usize,
    dq: usize,
) -> Result<Tensor<T>> {
    let g = geometry(fl, fr, dq)?;
    check_gwc(&g, ng)?;
    let per_group = g.c / ng;
    let scale = cast_usize::<T>(ng) / cast_usize::<T>(g.c);
    let plane = g.h * g.w;

    let mut out = vec![T::zero(); g.b * ng * dq * plane];
    for bi in 0..g.b {
        for grp in 0..ng {
            for d in 0..dq.min(g.w) {
                for y in 0..g.h {
                    let out_row =
                        &mut out[(((bi * ng + grp) * dq + d) * g.h + y) * g.w..][..g.w];
                    for c in grp * per_group..(grp + 1) * per_group {
                        let fl_row = &fl.data()[((bi * g.c + c) * g.h + y) * g.w..][..g.w];
                        let fr_row = &fr.data()[((bi * g.c + c) * g.h + y) * g.w..][..g.w];
                        for x in d..g.w {
                            let e = fl_row[x] - fr_row[x - d];
                            out_row[x] += e * e;
                        }
                    }
                    for x in d..g.w {
                        out_row[x] *= scale;
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[g.b, ng, dq, g.h, g.w], out)?;

    if tape.is_recording() {
        let (flc, frc) = (fl.clone(), fr.clone());
        tape.record(&out, move |gy, store| {
            let gd = gy.data();
            let mut dfl = vec![T::zero(); flc.numel()];
            let mut dfr = vec![T::zero(); frc.numel()];
            let (b, c, h, w) = (
                flc.shape()[0],
                flc.shape()[1],
                flc.shape()[2],
                flc.shape()[3],
            );
            let per_group = c / ng;
            let scale = cast_usize::<T>(ng) / cast_usize::<T>(c);
            let two = cast::<T>(2.0);
            for bi in 0..b {
                for grp in 0..ng {
                    for d in 0..dq.min(w) {
                        for y in 0..h {
                            let g_row =
                                &gd[(((bi * ng + grp) * dq + d) * h + y) * w..][..w];
                            for ch in grp * per_group..(grp + 1) * per_group {
                                let base = ((bi * c + ch) * h + y) * w;
                                for x in d..w {
                                    let e = flc.data()[base + x] - frc.data()[base + x - d];
                                    let gv = scale * two * e * g_row[x];
                                    dfl[base + x] += gv;
                                    dfr[base + x - d] -= gv;
                                }
                            }
                        }
                    }
                }
            }
            store.accumulate(flc.id(), Tensor::from_vec(flc.shape(), dfl).expect("fl shape"));
            store.accumulate(frc.id(), Tensor::from_vec(frc.shape(), dfr).expect("fr shape"));
        });
    }
    Ok(out)
}

fn pixel_norms<T: Scalar>(f: &Tensor<T>, b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let mut norms = vec![T::zero(); b * h * w];
    for bi in 0..b {
        for ch in 0..c {
            let plane = &f.data()[(bi * c + ch) * h * w..][..h * w];
            let out = &mut norms[bi * h * w..][..h * w];
            for (o, &v) in out.iter_mut().zip(plane.iter()) {
                *o += v * v;
            }
        }
    }
    for n in norms.iter_mut() {
        *n = n.sqrt();
    }
    norms
}

/// Cosine-similarity volume over the 12-channel compressed features. One
/// output channel; the denominator is clamped below at 1e-9.
pub fn build_norm_corr<T: Scalar>(
    tape: &mut Tape<T>,
    fl: &Tensor<T>,
    fr: &Tensor<T>,
    dq: usize,
) -> Result<Tensor<T>> {
    let g = geometry(fl, fr, dq)?;
    check_corr(&g, "norm-corr volume")?;
    let plane = g.h * g.w;
    let eps = cast::<T>(NORM_EPS);

    let nl = pixel_norms(fl, g.b, g.c, g.h, g.w);
    let nr = pixel_norms(fr, g.b, g.c, g.h, g.w);

    let mut out = vec![T::zero(); g.b * dq * plane];
    for bi in 0..g.b {
        for d in 0..dq.min(g.w) {
            for y in 0..g.h {
                for x in d..g.w {
                    let mut dot = T::zero();
                    for c in 0..g.c {
                        let base = ((bi * g.c + c) * g.h + y) * g.w;
                        dot += fl.data()[base + x] * fr.data()[base + x - d];
                    }
                    let den = (nl[(bi * g.h + y) * g.w + x]
                        * nr[(bi * g.h + y) * g.w + x - d])
                        .max(eps);
                    out[((bi * dq + d) * g.h + y) * g.w + x] = dot / den;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[g.b, 1, dq, g.h, g.w], out)?;

    if tape.is_recording() {
        let (flc, frc) = (fl.clone(), fr.clone());
        tape.record(&out, move |gy, store| {
            let gd = gy.data();
            let (b, c, h, w) = (
                flc.shape()[0],
                flc.shape()[1],
                flc.shape()[2],
                flc.shape()[3],
            );
            let nl = pixel_norms(&flc, b, c, h, w);
            let nr = pixel_norms(&frc, b, c, h, w);
            let mut dfl = vec![T::zero(); flc.numel()];
            let mut dfr = vec![T::zero(); frc.numel()];
            for bi in 0..b {
                for d in 0..dq.min(w) {
                    for y in 0..h {
                        for x in d..w {
                            let gv = gd[((bi * dq + d) * h + y) * w + x];
                            if gv == T::zero() {
                                continue;
                            }
                            let nu = nl[(bi * h + y) * w + x];
                            let nv = nr[(bi * h + y) * w + x - d];
                            let raw = nu * nv;
                            let den = raw.max(eps);
                            let mut dot = T::zero();
                            for ch in 0..c {
                                let base = ((bi * c + ch) * h + y) * w;
                                dot += flc.data()[base + x] * frc.data()[base + x - d];
                            }
                            let clamped = raw < eps;
                            for ch in 0..c {
                                let base = ((bi * c + ch) * h + y) * w;
                                let u = flc.data()[base + x];
                                let v = frc.data()[base + x - d];
                                if clamped {
                                    dfl[base + x] += gv * v / den;
                                    dfr[base + x - d] += gv * u / den;
                                } else {
                                    dfl[base + x] +=
                                        gv * (v / den - dot * u / (nu * nu * den));
                                    dfr[base + x - d] +=
                                        gv * (u / den - dot * v / (nv * nv * den));
                                }
                            }
                        }
                    }
                }
            }
            store.accumulate(flc.id(), Tensor::from_vec(flc.shape(), dfl).expect("fl shape"));
            store.accumulate(frc.id(), Tensor::from_vec(frc.shape(), dfr).expect("fr shape"));
        });
    }
    Ok(out)
}

/// Concatenation volume: channels 0..12 carry `fl(x,y)`, channels 12..24 carry
/// `fr(x-d,y)`; both halves are zero where `x-d` is out of frame.
pub fn build_concat<T: Scalar>(
    tape: &mut Tape<T>,
    fl: &Tensor<T>,
    fr: &Tensor<T>,
    dq: usize,
) -> Result<Tensor<T>> {
    let g = geometry(fl, fr, dq)?;
    check_corr(&g, "concat volume")?;
    let cv = 2 * CORR_CHANNELS;
    let plane = g.h * g.w;

    let mut out = vec![T::zero(); g.b * cv * dq * plane];
    for bi in 0..g.b {
        for ch in 0..CORR_CHANNELS {
            for d in 0..dq.min(g.w) {
                for y in 0..g.h {
                    let fl_row = &fl.data()[((bi * g.c + ch) * g.h + y) * g.w..][..g.w];
                    let fr_row = &fr.data()[((bi * g.c + ch) * g.h + y) * g.w..][..g.w];
                    let l_row =
                        &mut out[(((bi * cv + ch) * dq + d) * g.h + y) * g.w..][..g.w];
                    for x in d..g.w {
                        l_row[x] = fl_row[x];
                    }
                    let r_row = &mut out
                        [(((bi * cv + CORR_CHANNELS + ch) * dq + d) * g.h + y) * g.w..][..g.w];
                    for x in d..g.w {
                        r_row[x] = fr_row[x - d];
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[g.b, cv, dq, g.h, g.w], out)?;

    if tape.is_recording() {
        let (fl_id, fr_id) = (fl.id(), fr.id());
        let fl_shape = fl.shape().to_vec();
        let (b, c, h, w) = (g.b, g.c, g.h, g.w);
        tape.record(&out, move |gy, store| {
            let gd = gy.data();
            let mut dfl = vec![T::zero(); b * c * h * w];
            let mut dfr = vec![T::zero(); b * c * h * w];
            for bi in 0..b {
                for ch in 0..CORR_CHANNELS {
                    for d in 0..dq.min(w) {
                        for y in 0..h {
                            let base = ((bi * c + ch) * h + y) * w;
                            let l_row =
                                &gd[(((bi * cv + ch) * dq + d) * h + y) * w..][..w];
                            let r_row = &gd
                                [(((bi * cv + CORR_CHANNELS + ch) * dq + d) * h + y) * w..]
                                [..w];
                            for x in d..w {
                                dfl[base + x] += l_row[x];
                                dfr[base + x - d] += r_row[x];
                            }
                        }
                    }
                }
            }
            let fl_shape2 = fl_shape.clone();
            store.accumulate(fl_id, Tensor::from_vec(&fl_shape, dfl).expect("fl shape"));
            store.accumulate(fr_id, Tensor::from_vec(&fl_shape2, dfr).expect("fr shape"));
        });
    }
    Ok(out)
}

/// Build the volume selected by `kind`.
pub fn build_volume<T: Scalar>(
    tape: &mut Tape<T>,
    kind: VolumeKind,
    fl: &Tensor<T>,
    fr: &Tensor<T>,
    ng: usize,
    dq: usize,
) -> Result<Tensor<T>> {
    match kind {
        VolumeKind::GwcDot => build_gwc_dot(tape, fl, fr, ng, dq),
        VolumeKind::GwcSub => build_gwc_sub(tape, fl, fr, ng, dq),
        VolumeKind::NormCorr => build_norm_corr(tape, fl, fr, dq),
        VolumeKind::Concat => build_concat(tape, fl, fr, dq),
    }
}

/// Scalar reference construction: one value at a time, straight from the
/// definitions, with no shared loop structure or buffers. Slow on purpose.
pub fn oracle<T: Scalar>(
    kind: VolumeKind,
    fl: &Tensor<T>,
    fr: &Tensor<T>,
    ng: usize,
    dq: usize,
) -> Result<Tensor<T>> {
    same_shape(fl, fr, "cost volume features")?;
    let [b, c, h, w] = fl.dims::<4>()?;
    let at = |f: &Tensor<T>, bi: usize, ch: usize, y: usize, x: usize| {
        f.data()[((bi * c + ch) * h + y) * w + x]
    };
    let cv = kind.channels(ng);
    let mut out = vec![T::zero(); b * cv * dq * h * w];
    for bi in 0..b {
        for oc in 0..cv {
            for d in 0..dq {
                for y in 0..h {
                    for x in 0..w {
                        if x < d {
                            continue;
                        }
                        let value = match kind {
                            VolumeKind::GwcDot => {
                                let per = c / ng;
                                let mut acc = T::zero();
                                for k in 0..per {
                                    let ch = oc * per + k;
                                    acc += at(fl, bi, ch, y, x) * at(fr, bi, ch, y, x - d);
                                }
                                acc * cast_usize::<T>(ng) / cast_usize::<T>(c)
                            }
                            VolumeKind::GwcSub => {
                                let per = c / ng;
                                let mut acc = T::zero();
                                for k in 0..per {
                                    let ch = oc * per + k;
                                    let e = at(fl, bi, ch, y, x) - at(fr, bi, ch, y, x - d);
                                    acc += e * e;
                                }
                                acc * cast_usize::<T>(ng) / cast_usize::<T>(c)
                            }
                            VolumeKind::NormCorr => {
                                let mut dot = T::zero();
                                let mut nl = T::zero();
                                let mut nr = T::zero();
                                for ch in 0..c {
                                    let u = at(fl, bi, ch, y, x);
                                    let v = at(fr, bi, ch, y, x - d);
                                    dot += u * v;
                                    nl += u * u;
                                    nr += v * v;
                                }
                                dot / (nl.sqrt() * nr.sqrt()).max(cast::<T>(NORM_EPS))
                            }
                            VolumeKind::Concat => {
                                if oc < CORR_CHANNELS {
                                    at(fl, bi, oc, y, x)
                                } else {
                                    at(fr, bi, oc - CORR_CHANNELS, y, x - d)
                                }
                            }
                        };
                        out[(((bi * cv + oc) * dq + d) * h + y) * w + x] = value;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, cv, dq, h, w], out)
}
