use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorId};

/// Gradients keyed by tensor identity, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct GradStore<T: Scalar> {
    grads: HashMap<TensorId, Tensor<T>>,
}

impl<T: Scalar> GradStore<T> {
    fn new() -> Self {
        GradStore {
            grads: HashMap::new(),
        }
    }

    pub fn get(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        self.grads.get(&t.id())
    }

    pub fn by_id(&self, id: TensorId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `g` into the gradient slot for `id`. Gradients always have the
    /// shape of the tensor they belong to, so a mismatch is a broken VJP.
    pub fn accumulate(&mut self, id: TensorId, g: Tensor<T>) {
        match self.grads.get_mut(&id) {
            None => {
                self.grads.insert(id, g);
            }
            Some(acc) => {
                assert_eq!(
                    acc.shape(),
                    g.shape(),
                    "gradient accumulation with mismatched shapes"
                );
                let sum: Vec<T> = acc
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&a, &b)| a + b)
                    .collect();
                *acc = Tensor::from_vec(&g.shape().to_vec(), sum).expect("same shape");
            }
        }
    }
}

type Backward<T> = Box<dyn FnOnce(&Tensor<T>, &mut GradStore<T>)>;

struct Node<T: Scalar> {
    out: TensorId,
    backward: Backward<T>,
}

/// Reverse-mode tape. Operations append one node each; [`Tape::backward`]
/// replays them once in reverse. The tape is confined to a single thread.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    enabled: bool,
    consumed: bool,
}

impl<T: Scalar> Tape<T> {
    /// Recording tape for training and gradient checks.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            enabled: true,
            consumed: false,
        }
    }

    /// Non-recording tape: operations run forward-only. Used for inference
    /// and for the finite-difference passes of the gradient checker.
    pub fn disabled() -> Self {
        Tape {
            nodes: Vec::new(),
            enabled: false,
            consumed: false,
        }
    }

    #[inline]
    pub fn is_recording(&self) -> bool {
        self.enabled
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Registers the VJP for a freshly produced tensor. The closure receives
    /// the gradient with respect to `out` and accumulates gradients for the
    /// operation inputs.
    pub fn record(
        &mut self,
        out: &Tensor<T>,
        backward: impl FnOnce(&Tensor<T>, &mut GradStore<T>) + 'static,
    ) {
        if !self.enabled {
            return;
        }
        assert!(
            !self.consumed,
            "recording on a consumed tape; call reset() first"
        );
        self.nodes.push(Node {
            out: out.id(),
            backward: Box::new(backward),
        });
    }

    /// Runs reverse accumulation from a scalar loss. Consumes the recorded
    /// nodes; a second call without [`Tape::reset`] is rejected.
    pub fn backward(&mut self, loss: &Tensor<T>) -> Result<GradStore<T>> {
        if !self.enabled {
            return Err(Error::Tape("backward on a disabled tape".into()));
        }
        if self.consumed {
            return Err(Error::Tape(
                "backward called twice without reset".into(),
            ));
        }
        if loss.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        self.consumed = true;
        let mut store = GradStore::new();
        store.accumulate(loss.id(), Tensor::full(loss.shape(), T::one()));
        for node in self.nodes.drain(..).rev() {
            let grad_out = store.by_id(node.out).cloned();
            if let Some(g) = grad_out {
                (node.backward)(&g, &mut store);
            }
        }
        Ok(store)
    }

    /// Clears recorded nodes and re-arms the tape.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences, element by element, and returns the worst relative
/// error `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` must be deterministic; it is re-evaluated `2 * x.numel()` times on a
/// disabled tape. Run this at `f64`: at `f32` the difference quotient drowns
/// in rounding error.
pub fn grad_check<T: Scalar>(
    f: &dyn Fn(&mut Tape<T>, &Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    eps: T,
) -> Result<f64> {
    let mut tape = Tape::new();
    let y = f(&mut tape, x)?;
    if y.numel() != 1 {
        return Err(Error::Tape(format!(
            "grad_check requires a scalar function, got output shape {:?}",
            y.shape()
        )));
    }
    let store = tape.backward(&y)?;
    let analytic = store
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    probe_coords(f, x, &analytic, eps, 0..x.numel())
}

/// Like [`grad_check`], but compares only `probes` randomly chosen
/// coordinates of `x` against central differences. The analytic gradient is
/// still computed in full through the tape; sampling only bounds the number
/// of forward evaluations, which keeps end-to-end model checks affordable.
pub fn grad_check_sampled<T: Scalar>(
    f: &dyn Fn(&mut Tape<T>, &Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    eps: T,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let y = f(&mut tape, x)?;
    if y.numel() != 1 {
        return Err(Error::Tape(format!(
            "grad_check requires a scalar function, got output shape {:?}",
            y.shape()
        )));
    }
    let store = tape.backward(&y)?;
    let analytic = store
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..x.numel()).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    order.truncate(probes);
    probe_coords(f, x, &analytic, eps, order.into_iter())
}

fn probe_coords<T: Scalar>(
    f: &dyn Fn(&mut Tape<T>, &Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    analytic: &Tensor<T>,
    eps: T,
    coords: impl Iterator<Item = usize>,
) -> Result<f64> {
    let eps64 = eps.to_f64();
    let mut worst = 0.0f64;
    for i in coords {
        let base = x.data()[i];
        let xp = x.with_element(i, base + eps);
        let xm = x.with_element(i, base - eps);
        let fp = f(&mut Tape::disabled(), &xp)?.item()?.to_f64();
        let fm = f(&mut Tape::disabled(), &xm)?.item()?.to_f64();
        let numeric = (fp - fm) / (2.0 * eps64);
        let a = analytic.data()[i].to_f64();
        let err = (a - numeric).abs() / f64::max(1.0, a.abs());
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
