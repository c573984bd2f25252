use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Concatenate along the channel axis (axis 1). All inputs must agree on every
/// other extent.
pub fn concat_channels<T: Scalar>(tape: &mut Tape<T>, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat_channels: no inputs"))?;
    if first.ndim() < 2 {
        return Err(Error::shape(format!(
            "concat_channels: expected [B, C, ...] inputs, got {:?}",
            first.shape()
        )));
    }
    let batch = first.shape()[0];
    let inner: usize = first.shape()[2..].iter().product();
    let mut channels = Vec::with_capacity(xs.len());
    for x in xs {
        if x.ndim() != first.ndim()
            || x.shape()[0] != batch
            || x.shape()[2..] != first.shape()[2..]
        {
            return Err(Error::shape(format!(
                "concat_channels: incompatible shapes {:?} and {:?}",
                first.shape(),
                x.shape()
            )));
        }
        channels.push(x.shape()[1]);
    }
    let total: usize = channels.iter().sum();

    let mut out_shape = first.shape().to_vec();
    out_shape[1] = total;
    let mut out = vec![T::zero(); batch * total * inner];
    for b in 0..batch {
        let mut off = 0;
        for (x, &c) in xs.iter().zip(channels.iter()) {
            let src = &x.data()[b * c * inner..][..c * inner];
            out[(b * total + off) * inner..][..c * inner].copy_from_slice(src);
            off += c;
        }
    }
    let out = Tensor::from_vec(&out_shape, out)?;

    if tape.is_recording() {
        let ids: Vec<_> = xs.iter().map(|x| x.id()).collect();
        let shapes: Vec<Vec<usize>> = xs.iter().map(|x| x.shape().to_vec()).collect();
        let channels = channels.clone();
        tape.record(&out, move |gy, store| {
            let gd = gy.data();
            for (i, (id, shape)) in ids.iter().zip(shapes.iter()).enumerate() {
                let c = channels[i];
                let off: usize = channels[..i].iter().sum();
                let mut dx = vec![T::zero(); batch * c * inner];
                for b in 0..batch {
                    let src = &gd[(b * total + off) * inner..][..c * inner];
                    dx[b * c * inner..][..c * inner].copy_from_slice(src);
                }
                store.accumulate(*id, Tensor::from_vec(shape, dx).expect("input shape"));
            }
        });
    }
    Ok(out)
}

/// Zero-pad the end of axis 2 of a 5-D tensor by `extra` slots.
pub fn pad_dim2<T: Scalar>(tape: &mut Tape<T>, x: &Tensor<T>, extra: usize) -> Result<Tensor<T>> {
    let [b, c, d, h, w] = x.dims::<5>()?;
    if extra == 0 {
        return Ok(x.clone());
    }
    let inner = h * w;
    let dd = d + extra;
    let mut out = vec![T::zero(); b * c * dd * inner];
    for plane in 0..b * c {
        let src = &x.data()[plane * d * inner..][..d * inner];
        out[plane * dd * inner..][..d * inner].copy_from_slice(src);
    }
    let out = Tensor::from_vec(&[b, c, dd, h, w], out)?;
    if tape.is_recording() {
        let x_id = x.id();
        let x_shape = x.shape().to_vec();
        tape.record(&out, move |gy, store| {
            let mut dx = vec![T::zero(); b * c * d * inner];
            for plane in 0..b * c {
                let src = &gy.data()[plane * dd * inner..][..d * inner];
                dx[plane * d * inner..][..d * inner].copy_from_slice(src);
            }
            store.accumulate(x_id, Tensor::from_vec(&x_shape, dx).expect("input shape"));
        });
    }
    Ok(out)
}

/// Keep the first `keep` slots of axis 2 of a 5-D tensor.
pub fn crop_dim2<T: Scalar>(tape: &mut Tape<T>, x: &Tensor<T>, keep: usize) -> Result<Tensor<T>> {
    let [b, c, d, h, w] = x.dims::<5>()?;
    if keep > d {
        return Err(Error::shape(format!(
            "crop_dim2: cannot keep {} of {} slots",
            keep, d
        )));
    }
    if keep == d {
        return Ok(x.clone());
    }
    let inner = h * w;
    let mut out = vec![T::zero(); b * c * keep * inner];
    for plane in 0..b * c {
        let src = &x.data()[plane * d * inner..][..keep * inner];
        out[plane * keep * inner..][..keep * inner].copy_from_slice(src);
    }
    let out = Tensor::from_vec(&[b, c, keep, h, w], out)?;
    if tape.is_recording() {
        let x_id = x.id();
        let x_shape = x.shape().to_vec();
        tape.record(&out, move |gy, store| {
            let mut dx = vec![T::zero(); b * c * d * inner];
            for plane in 0..b * c {
                let src = &gy.data()[plane * keep * inner..][..keep * inner];
                dx[plane * d * inner..][..keep * inner].copy_from_slice(src);
            }
            store.accumulate(x_id, Tensor::from_vec(&x_shape, dx).expect("input shape"));
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

    #[test]
    fn concat_stacks_channels_in_argument_order() {
        let a = Tensor::from_vec(&[1, 1, 2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2, 2], vec![3.0f64, 4.0, 5.0, 6.0]).unwrap();
        let y = concat_channels(&mut Tape::disabled(), &[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn concat_respects_batch_blocks() {
        let a = Tensor::from_vec(&[2, 1, 1], vec![1.0f64, 10.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1, 1], vec![2.0f64, 20.0]).unwrap();
        let y = concat_channels(&mut Tape::disabled(), &[&a, &b]).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 10.0, 20.0]);
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let a = Tensor::<f64>::zeros(&[1, 1, 3]);
        let b = Tensor::<f64>::zeros(&[1, 1, 4]);
        assert!(concat_channels(&mut Tape::disabled(), &[&a, &b]).is_err());
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let padded = pad_dim2(&mut Tape::disabled(), &x, 5).unwrap();
        assert_eq!(padded.shape(), &[1, 2, 8, 2, 2]);
        let tail = &padded.data()[padded.numel() - 5 * 4..];
        assert!(tail.iter().all(|&v| v == 0.0));
        let back = crop_dim2(&mut Tape::disabled(), &padded, 3).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let other = Tensor::<f64>::from_fn(&[1, 1, 3, 2, 2], |_| rng.gen_range(-1.0..1.0));

        let cat = {
            let other = other.clone();
            move |t: &mut Tape<f64>, v: &Tensor<f64>| {
                let y = concat_channels(t, &[v, &other])?;
                let r = Tensor::from_fn(y.shape(), |i| ((i % 7) as f64) - 3.0);
                let y = mul(t, &y, &r)?;
                Ok(sum_all(t, &y))
            }
        };
        let pad = move |t: &mut Tape<f64>, v: &Tensor<f64>| {
            let y = pad_dim2(t, v, 5)?;
            let r = Tensor::from_fn(y.shape(), |i| ((i % 5) as f64) - 2.0);
            let y = mul(t, &y, &r)?;
            Ok(sum_all(t, &y))
        };
        let crop = move |t: &mut Tape<f64>, v: &Tensor<f64>| {
            let y = crop_dim2(t, v, 2)?;
            let r = Tensor::from_fn(y.shape(), |i| ((i % 3) as f64) - 1.0);
            let y = mul(t, &y, &r)?;
            Ok(sum_all(t, &y))
        };
        assert!(grad_check(&cat, &x, 1e-4).unwrap() < 1e-4);
        assert!(grad_check(&pad, &x, 1e-4).unwrap() < 1e-4);
        assert!(grad_check(&crop, &x, 1e-4).unwrap() < 1e-4);
    }
}
