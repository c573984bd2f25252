use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Softmax along `axis`, stabilized by subtracting the lane maximum.
pub fn softmax_axis<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(Error::shape(format!(
            "softmax_axis: axis {} out of range for shape {:?}",
            axis,
            x.shape()
        )));
    }
    let lane = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();

    let xd = x.data();
    let mut y = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut m = xd[base];
            for k in 1..lane {
                let v = xd[base + k * inner];
                if v > m {
                    m = v;
                }
            }
            let mut z = T::zero();
            for k in 0..lane {
                let e = (xd[base + k * inner] - m).exp();
                y[base + k * inner] = e;
                z += e;
            }
            for k in 0..lane {
                y[base + k * inner] /= z;
            }
        }
    }
    let out = Tensor::from_vec(x.shape(), y)?;

    if tape.is_recording() {
        let yc = out.clone();
        let x_id = x.id();
        let x_shape = x.shape().to_vec();
        tape.record(&out, move |gy, store| {
            let yd = yc.data();
            let gd = gy.data();
            let mut dx = vec![T::zero(); gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let mut dot = T::zero();
                    for k in 0..lane {
                        let idx = base + k * inner;
                        dot += gd[idx] * yd[idx];
                    }
                    for k in 0..lane {
                        let idx = base + k * inner;
                        dx[idx] = yd[idx] * (gd[idx] - dot);
                    }
                }
            }
            store.accumulate(x_id, Tensor::from_vec(&x_shape, dx).expect("input shape"));
        });
    }
    Ok(out)
}
