use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a tensor value, used by the tape to route gradients.
///
/// Cloning a tensor keeps its id (same value); every operation output gets a
/// fresh one.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct TensorId(u64);

fn fresh_id() -> TensorId {
    TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
}

/// Dense row-major tensor. Value-semantic: the buffer is shared on clone and
/// never mutated after construction.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    id: TensorId,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "buffer of {} elements does not fill shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            id: fresh_id(),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); numel]),
            id: fresh_id(),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
            id: fresh_id(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = (0..numel).map(|i| f(i)).collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            id: fresh_id(),
        }
    }

    pub fn rand_uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Self {
        Tensor::from_fn(shape, |_| {
            crate::scalar::cast::<T>(rng.gen_range(lo..hi))
        })
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn id(&self) -> TensorId {
        self.id
    }

    /// Fixed-arity shape accessor: `let [b, c, h, w] = t.dims::<4>()?;`
    pub fn dims<const N: usize>(&self) -> Result<[usize; N]> {
        if self.shape.len() != N {
            return Err(Error::shape(format!(
                "expected a rank-{} tensor, got shape {:?}",
                N, self.shape
            )));
        }
        let mut out = [0usize; N];
        out.copy_from_slice(&self.shape);
        Ok(out)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
            id: fresh_id(),
        }
    }

    /// Same buffer viewed under a different shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "cannot view {:?} as {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            id: fresh_id(),
        })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack: no tensors given".to_string()))?;
        let mut data = Vec::with_capacity(parts.len() * first.numel());
        for p in parts {
            if p.shape() != first.shape() {
                return Err(Error::shape(format!(
                    "stack: shapes {:?} and {:?} disagree",
                    first.shape(),
                    p.shape()
                )));
            }
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(first.shape());
        Tensor::from_vec(&shape, data)
    }

    /// Rebuilds this tensor with a perturbed single element; used by finite
    /// differences.
    pub fn with_element(&self, index: usize, value: T) -> Tensor<T> {
        let mut data = self.data.as_ref().clone();
        data[index] = value;
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            id: fresh_id(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{}: shapes {:?} and {:?} differ",
            what,
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
