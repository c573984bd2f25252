//! Parameterized building blocks: thin structs that own tensors and forward
//! through the ops in [`crate::ops`].
//!
//! Every block implements [`Layer`], which exposes the trainable parameters
//! and persistent state under stable dotted names. Construction order is the
//! only consumer of randomness, so a fixed seed fixes every parameter.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{batch_norm, conv2d, conv3d, conv3d_transposed, leaky_relu, Conv2dSpec, Conv3dSpec, Mode};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Slope shared by every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Persistent state keyed by dotted path, ordered for reproducible dumps.
pub type StateMap<T> = BTreeMap<String, Tensor<T>>;

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{}.{}", prefix, name)
    }
}

fn take<T: Scalar>(src: &mut StateMap<T>, name: &str, dst: &mut Tensor<T>) -> Result<()> {
    let t = src
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor \"{}\"", name)))?;
    if t.shape() != dst.shape() {
        return Err(Error::Checkpoint(format!(
            "tensor \"{}\": stored shape {:?}, model expects {:?}",
            name,
            t.shape(),
            dst.shape()
        )));
    }
    *dst = t;
    Ok(())
}

/// Uniform fan-in init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn fan_in_uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(rng, shape, -bound, bound)
}

/// Parameter and state plumbing common to all blocks.
pub trait Layer<T: Scalar> {
    /// Visit every trainable parameter, depth-first, in declaration order.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));
    /// Collect parameters plus non-trainable state (running statistics).
    fn collect_state(&self, prefix: &str, out: &mut StateMap<T>);
    /// Restore state collected by [`Layer::collect_state`], consuming `src`.
    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<()>;
}

// --- Bare convolutions --------------------------------------------------

pub struct Conv2dLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub spec: Conv2dSpec,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(
        rng: &mut impl Rng,
        ci: usize,
        co: usize,
        k: (usize, usize),
        spec: Conv2dSpec,
        with_bias: bool,
    ) -> Self {
        let fan_in = ci * k.0 * k.1;
        Conv2dLayer {
            weight: fan_in_uniform(rng, &[co, ci, k.0, k.1], fan_in),
            bias: with_bias.then(|| fan_in_uniform(rng, &[co], fan_in)),
            spec,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(tape, x, &self.weight, self.bias.as_ref(), self.spec)
    }
}

impl<T: Scalar> Layer<T> for Conv2dLayer<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), b);
        }
    }
    fn collect_state(&self, prefix: &str, out: &mut StateMap<T>) {
        out.insert(join(prefix, "weight"), self.weight.clone());
        if let Some(b) = self.bias.as_ref() {
            out.insert(join(prefix, "bias"), b.clone());
        }
    }
    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<()> {
        take(src, &join(prefix, "weight"), &mut self.weight)?;
        if let Some(b) = self.bias.as_mut() {
            take(src, &join(prefix, "bias"), b)?;
        }
        Ok(())
    }
}

pub struct Conv3dLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub spec: Conv3dSpec,
}

impl<T: Scalar> Conv3dLayer<T> {
    pub fn new(
        rng: &mut impl Rng,
        ci: usize,
        co: usize,
        k: (usize, usize, usize),
        spec: Conv3dSpec,
        with_bias: bool,
    ) -> Self {
        let fan_in = ci * k.0 * k.1 * k.2;
        Conv3dLayer {
            weight: fan_in_uniform(rng, &[co, ci, k.0, k.1, k.2], fan_in),
            bias: with_bias.then(|| fan_in_uniform(rng, &[co], fan_in)),
            spec,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv3d(tape, x, &self.weight, self.bias.as_ref(), self.spec)
    }
}

impl<T: Scalar> Layer<T> for Conv3dLayer<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), b);
        }
    }
    fn collect_state(&self, prefix: &str, out: &mut StateMap<T>) {
        out.insert(join(prefix, "weight"), self.weight.clone());
        if let Some(b) = self.bias.as_ref() {
            out.insert(join(prefix, "bias"), b.clone());
        }
    }
    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<()> {
        take(src, &join(prefix, "weight"), &mut self.weight)?;
        if let Some(b) = self.bias.as_mut() {
            take(src, &join(prefix, "bias"), b)?;
        }
        Ok(())
    }
}

pub struct Deconv3dLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub spec: Conv3dSpec,
}

impl<T: Scalar> Deconv3dLayer<T> {
    pub fn new(
        rng: &mut impl Rng,
        ci: usize,
        co: usize,
        k: (usize, usize, usize),
        spec: Conv3dSpec,
        with_bias: bool,
    ) -> Self {
        let fan_in = co * k.0 * k.1 * k.2;
        Deconv3dLayer {
            weight: fan_in_uniform(rng, &[ci, co, k.0, k.1, k.2], fan_in),
            bias: with_bias.then(|| fan_in_uniform(rng, &[co], fan_in)),
            spec,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv3d_transposed(tape, x, &self.weight, self.bias.as_ref(), self.spec)
    }
}

impl<T: Scalar> Layer<T> for Deconv3dLayer<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), b);
        }
    }
    fn collect_state(&self, prefix: &str, out: &mut StateMap<T>) {
        out.insert(join(prefix, "weight"), self.weight.clone());
        if let Some(b) = self.bias.as_ref() {
            out.insert(join(prefix, "bias"), b.clone());
        }
    }
    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<()> {
        take(src, &join(prefix, "weight"), &mut self.weight)?;
        if let Some(b) = self.bias.as_mut() {
            take(src, &join(prefix, "bias"), b)?;
        }
        Ok(())
    }
}

// --- Batch norm -----------------------------------------------------------

pub struct BatchNormLayer<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        batch_norm(
            tape,
            x,
            &self.gamma,
            &self.beta,
            &mut self.running_mean,
            &mut self.running_var,
            mode,
        )
    }
}

impl<T: Scalar> Layer<T> for BatchNormLayer<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
    fn collect_state(&self, prefix: &str, out: &mut StateMap<T>) {
        out.insert(join(prefix, "gamma"), self.gamma.clone());
        out.insert(join(prefix, "beta"), self.beta.clone());
        out.insert(join(prefix, "running_mean"), self.running_mean.clone());
        out.insert(join(prefix, "running_var"), self.running_var.clone());
    }
    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<()> {
        take(src, &join(prefix, "gamma"), &mut self.gamma)?;
        take(src, &join(prefix, "beta"), &mut self.beta)?;
        take(src, &join(prefix, "running_mean"), &mut self.running_mean)?;
        take(src, &join(prefix, "running_var"), &mut self.running_var)?;
        Ok(())
    }
}

// --- Composite blocks -------------------------------------------------------

/// 2-D convolution (no bias) + batch norm + leaky ReLU.
pub struct ConvBnAct2d<T: Scalar> {
    pub conv: Conv2dLayer<T>,
    pub bn: BatchNormLayer<T>,
}

impl<T: Scalar> ConvBnAct2d<T> {
    pub fn new(rng: &mut impl Rng, ci: usize, co: usize, k: (usize, usize), spec: Conv2dSpec) -> Self {
        ConvBnAct2d {
            conv: Conv2dLayer::new(rng, ci, co, k, spec, false),
            bn: BatchNormLayer::new(co),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, &y, mode)?;
        Ok(leaky_relu(tape, &y, cast_slope::<T>()))
    }
}

fn cast_slope<T: Scalar>() -> T {
    crate::scalar::cast::<T>(LEAKY_SLOPE)
}

impl<T: Scalar> Layer<T> for ConvBnAct2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }
    fn collect_state(&self, prefix: &str, out: &mut StateMap<T>) {
        self.conv.collect_state(&join(prefix, "conv"), out);
        self.bn.collect_state(&join(prefix, "bn"), out);
    }
    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<()> {
        self.conv.load_state(&join(prefix, "conv"), src)?;
        self.bn.load_state(&join(prefix, "bn"), src)
    }
}

/// 3-D convolution (no bias) + batch norm + leaky ReLU.
pub struct ConvBnAct3d<T: Scalar> {
    pub conv: Conv3dLayer<T>,
    pub bn: BatchNormLayer<T>,
}

impl<T: Scalar> ConvBnAct3d<T> {
    pub fn new(
        rng: &mut impl Rng,
        ci: usize,
        co: usize,
        k: (usize, usize, usize),
        spec: Conv3dSpec,
    ) -> Self {
        ConvBnAct3d {
            conv: Conv3dLayer::new(rng, ci, co, k, spec, false),
            bn: BatchNormLayer::new(co),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, &y, mode)?;
        Ok(leaky_relu(tape, &y, cast_slope::<T>()))
    }
}

impl<T: Scalar> Layer<T> for ConvBnAct3d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }
    fn collect_state(&self, prefix: &str, out: &mut StateMap<T>) {
        self.conv.collect_state(&join(prefix, "conv"), out);
        self.bn.collect_state(&join(prefix, "bn"), out);
    }
    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<()> {
        self.conv.load_state(&join(prefix, "conv"), src)?;
        self.bn.load_state(&join(prefix, "bn"), src)
    }
}

/// Transposed 3-D convolution (no bias) + batch norm, no activation. Used by
/// the hourglass decoder, where the skip addition happens before the
/// stage's own convolution re-activates.
pub struct DeconvBn3d<T: Scalar> {
    pub deconv: Deconv3dLayer<T>,
    pub bn: BatchNormLayer<T>,
}

impl<T: Scalar> DeconvBn3d<T> {
    pub fn new(
        rng: &mut impl Rng,
        ci: usize,
        co: usize,
        k: (usize, usize, usize),
        spec: Conv3dSpec,
    ) -> Self {
        DeconvBn3d {
            deconv: Deconv3dLayer::new(rng, ci, co, k, spec, false),
            bn: BatchNormLayer::new(co),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.deconv.forward(tape, x)?;
        self.bn.forward(tape, &y, mode)
    }
}

impl<T: Scalar> Layer<T> for DeconvBn3d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.deconv.visit_params(&join(prefix, "deconv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }
    fn collect_state(&self, prefix: &str, out: &mut StateMap<T>) {
        self.deconv.collect_state(&join(prefix, "deconv"), out);
        self.bn.collect_state(&join(prefix, "bn"), out);
    }
    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<()> {
        self.deconv.load_state(&join(prefix, "deconv"), src)?;
        self.bn.load_state(&join(prefix, "bn"), src)
    }
}
