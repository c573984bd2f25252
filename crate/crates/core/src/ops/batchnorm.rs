use crate::error::{Error, Result};
use crate::scalar::{cast, cast_usize, Scalar};
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::Mode;

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

struct Layout {
    channels: usize,
    /// Elements per (batch, channel) plane.
    plane: usize,
    batch: usize,
}

fn layout<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Layout> {
    if x.ndim() < 3 {
        return Err(Error::shape(format!(
            "batch_norm: expected [B, C, ...] input, got {:?}",
            x.shape()
        )));
    }
    let batch = x.shape()[0];
    let channels = x.shape()[1];
    let plane = x.numel() / (batch * channels);
    for (t, name) in [(gamma, "gamma"), (beta, "beta")] {
        if t.shape() != [channels] {
            return Err(Error::shape(format!(
                "batch_norm: {} shape {:?}, expected [{}]",
                name,
                t.shape(),
                channels
            )));
        }
    }
    Ok(Layout {
        channels,
        plane,
        batch,
    })
}

fn per_channel_moments<T: Scalar>(x: &[T], l: &Layout) -> (Vec<T>, Vec<T>) {
    let n = cast_usize::<T>(l.batch * l.plane);
    let mut mean = vec![T::zero(); l.channels];
    let mut var = vec![T::zero(); l.channels];
    for c in 0..l.channels {
        let mut acc = T::zero();
        for b in 0..l.batch {
            let plane = &x[(b * l.channels + c) * l.plane..][..l.plane];
            for &v in plane {
                acc += v;
            }
        }
        mean[c] = acc / n;
        let mut sq = T::zero();
        for b in 0..l.batch {
            let plane = &x[(b * l.channels + c) * l.plane..][..l.plane];
            for &v in plane {
                let d = v - mean[c];
                sq += d * d;
            }
        }
        var[c] = sq / n;
    }
    (mean, var)
}

/// Batch normalization over the channel axis of a `[B, C, ...]` tensor.
///
/// Train mode normalizes with the biased batch variance and folds the batch
/// statistics into `running_mean` / `running_var` (unbiased variance,
/// momentum 0.1). Eval mode normalizes with the running statistics and
/// leaves them untouched.
pub fn batch_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let l = layout(x, gamma, beta)?;
    for (t, name) in [(&*running_mean, "running_mean"), (&*running_var, "running_var")] {
        if t.shape() != [l.channels] {
            return Err(Error::shape(format!(
                "batch_norm: {} shape {:?}, expected [{}]",
                name,
                t.shape(),
                l.channels
            )));
        }
    }
    let count = l.batch * l.plane;
    let eps = cast::<T>(EPS);

    let (mean, var) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::shape(
                    "batch_norm: train mode needs at least 2 elements per channel",
                ));
            }
            per_channel_moments(x.data(), &l)
        }
        Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for b in 0..l.batch {
        for c in 0..l.channels {
            let base = (b * l.channels + c) * l.plane;
            let (m, s) = (mean[c], inv_std[c]);
            let (gm, bt) = (gamma.data()[c], beta.data()[c]);
            for i in 0..l.plane {
                let h = (x.data()[base + i] - m) * s;
                xhat[base + i] = h;
                y[base + i] = gm * h + bt;
            }
        }
    }

    if matches!(mode, Mode::Train) {
        let mom = cast::<T>(MOMENTUM);
        let keep = T::one() - mom;
        let unbias = cast_usize::<T>(count) / cast_usize::<T>(count - 1);
        let rm: Vec<T> = running_mean
            .data()
            .iter()
            .zip(mean.iter())
            .map(|(&r, &m)| keep * r + mom * m)
            .collect();
        let rv: Vec<T> = running_var
            .data()
            .iter()
            .zip(var.iter())
            .map(|(&r, &v)| keep * r + mom * v * unbias)
            .collect();
        *running_mean = Tensor::from_vec(&[l.channels], rm)?;
        *running_var = Tensor::from_vec(&[l.channels], rv)?;
    }

    let out = Tensor::from_vec(x.shape(), y)?;
    if tape.is_recording() {
        let xhat = Tensor::from_vec(x.shape(), xhat)?;
        let gamma_c = gamma.clone();
        let (x_id, gamma_id, beta_id) = (x.id(), gamma.id(), beta.id());
        let x_shape = x.shape().to_vec();
        let lay = Layout { ..l };
        tape.record(&out, move |gy, store| {
            let gyd = gy.data();
            let xh = xhat.data();
            let mut dgamma = vec![T::zero(); lay.channels];
            let mut dbeta = vec![T::zero(); lay.channels];
            for b in 0..lay.batch {
                for c in 0..lay.channels {
                    let base = (b * lay.channels + c) * lay.plane;
                    let mut dg = T::zero();
                    let mut db = T::zero();
                    for i in 0..lay.plane {
                        dg += gyd[base + i] * xh[base + i];
                        db += gyd[base + i];
                    }
                    dgamma[c] += dg;
                    dbeta[c] += db;
                }
            }
            let mut dx = vec![T::zero(); gyd.len()];
            match mode {
                Mode::Train => {
                    // dx = inv_std * gamma * (dy - mean(dy) - xhat * mean(dy*xhat))
                    let n = cast_usize::<T>(lay.batch * lay.plane);
                    for c in 0..lay.channels {
                        let coeff = gamma_c.data()[c] * inv_std[c];
                        let mean_dy = dbeta[c] / n;
                        let mean_dyxh = dgamma[c] / n;
                        for b in 0..lay.batch {
                            let base = (b * lay.channels + c) * lay.plane;
                            for i in 0..lay.plane {
                                dx[base + i] = coeff
                                    * (gyd[base + i] - mean_dy - xh[base + i] * mean_dyxh);
                            }
                        }
                    }
                }
                Mode::Eval => {
                    for c in 0..lay.channels {
                        let coeff = gamma_c.data()[c] * inv_std[c];
                        for b in 0..lay.batch {
                            let base = (b * lay.channels + c) * lay.plane;
                            for i in 0..lay.plane {
                                dx[base + i] = coeff * gyd[base + i];
                            }
                        }
                    }
                }
            }
            store.accumulate(x_id, Tensor::from_vec(&x_shape, dx).expect("input shape"));
            store.accumulate(
                gamma_id,
                Tensor::from_vec(&[lay.channels], dgamma).expect("gamma shape"),
            );
            store.accumulate(
                beta_id,
                Tensor::from_vec(&[lay.channels], dbeta).expect("beta shape"),
            );
        });
    }
    Ok(out)
}
