use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{same_shape, Tensor};

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

pub fn add<T: Scalar>(tape: &mut Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let out = zip_map(a, b, |x, y| x + y);
    if tape.is_recording() {
        let (ai, bi) = (a.id(), b.id());
        tape.record(&out, move |g, store| {
            store.accumulate(ai, g.clone());
            store.accumulate(bi, g.clone());
        });
    }
    Ok(out)
}

pub fn sub<T: Scalar>(tape: &mut Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "sub")?;
    let out = zip_map(a, b, |x, y| x - y);
    if tape.is_recording() {
        let (ai, bi) = (a.id(), b.id());
        tape.record(&out, move |g, store| {
            store.accumulate(ai, g.clone());
            store.accumulate(bi, g.map(|v| -v));
        });
    }
    Ok(out)
}

pub fn mul<T: Scalar>(tape: &mut Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    let out = zip_map(a, b, |x, y| x * y);
    if tape.is_recording() {
        let (ai, bi) = (a.id(), b.id());
        let (ac, bc) = (a.clone(), b.clone());
        tape.record(&out, move |g, store| {
            store.accumulate(ai, zip_map(g, &bc, |gv, v| gv * v));
            store.accumulate(bi, zip_map(g, &ac, |gv, v| gv * v));
        });
    }
    Ok(out)
}

pub fn scale<T: Scalar>(tape: &mut Tape<T>, a: &Tensor<T>, c: T) -> Tensor<T> {
    let out = a.map(|v| v * c);
    if tape.is_recording() {
        let ai = a.id();
        tape.record(&out, move |g, store| {
            store.accumulate(ai, g.map(|v| v * c));
        });
    }
    out
}

pub fn sum_all<T: Scalar>(tape: &mut Tape<T>, a: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for &v in a.data() {
        acc += v;
    }
    let out = Tensor::scalar(acc);
    if tape.is_recording() {
        let ai = a.id();
        let shape = a.shape().to_vec();
        tape.record(&out, move |g, store| {
            let gv = g.data()[0];
            store.accumulate(ai, Tensor::full(&shape, gv));
        });
    }
    out
}

/// `x` for `x >= 0`, `slope * x` otherwise. The subgradient at zero is 1.
pub fn leaky_relu<T: Scalar>(tape: &mut Tape<T>, a: &Tensor<T>, slope: T) -> Tensor<T> {
    let out = a.map(|v| if v >= T::zero() { v } else { v * slope });
    if tape.is_recording() {
        let ai = a.id();
        let ac = a.clone();
        tape.record(&out, move |g, store| {
            store.accumulate(
                ai,
                zip_map(g, &ac, |gv, x| if x >= T::zero() { gv } else { gv * slope }),
            );
        });
    }
    out
}

pub fn relu<T: Scalar>(tape: &mut Tape<T>, a: &Tensor<T>) -> Tensor<T> {
    leaky_relu(tape, a, T::zero())
}
