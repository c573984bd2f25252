//! Adam with bias correction. Moment slots are keyed by parameter name, not
//! tensor identity, because a parameter tensor is replaced by a fresh one on
//! every update.

use std::collections::BTreeMap;

use crate::layers::Layer;
use crate::scalar::{cast, Scalar};
use crate::tape::GradStore;
use crate::tensor::Tensor;

const ADAM_EPS: f64 = 1e-8;

pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    t: u32,
    slots: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Apply one update to every parameter that received a gradient.
    pub fn step(&mut self, model: &mut dyn Layer<T>, grads: &GradStore<T>) {
        self.t += 1;
        let b1 = cast::<T>(self.beta1);
        let b2 = cast::<T>(self.beta2);
        let one = T::one();
        let corr1 = cast::<T>(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = cast::<T>(1.0 - self.beta2.powi(self.t as i32));
        let lr = cast::<T>(self.lr);
        let eps = cast::<T>(ADAM_EPS);
        let slots = &mut self.slots;

        model.visit_params("", &mut |name, p| {
            let Some(g) = grads.get(p) else { return };
            let (m, v) = slots
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let mut pd = p.data().to_vec();
            let mut md = m.data().to_vec();
            let mut vd = v.data().to_vec();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let mh = md[i] / corr1;
                let vh = vd[i] / corr2;
                pd[i] -= lr * mh / (vh.sqrt() + eps);
            }
            *m = Tensor::from_vec(p.shape(), md).expect("slot shape");
            *v = Tensor::from_vec(p.shape(), vd).expect("slot shape");
            *p = Tensor::from_vec(p.shape(), pd).expect("param shape");
        });
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }
}
