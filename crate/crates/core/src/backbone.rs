//! Siamese feature backbone: a strided residual stack that turns an RGB image
//! into quarter-resolution features, plus the 12-channel compression used by
//! the correlation-style cost volumes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{join, BatchNormLayer, Conv2dLayer, ConvBnAct2d, Layer, StateMap};
use crate::ops::{add, concat_channels, leaky_relu, Conv2dSpec, Mode};
use crate::scalar::{cast, Scalar};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct BackboneConfig {
    /// Stem and first-stage width at half resolution.
    pub base_channels: usize,
    /// Widths of the three quarter-resolution stages that get concatenated.
    pub stage_channels: [usize; 3],
    /// Residual block count per stage.
    pub blocks: [usize; 4],
    /// Channels after compression, shared by the correlation volumes.
    pub compressed_channels: usize,
}

impl BackboneConfig {
    /// Desk-scale preset: small widths, one block per stage.
    pub fn toy() -> Self {
        BackboneConfig {
            base_channels: 8,
            stage_channels: [16, 16, 16],
            blocks: [1, 1, 1, 1],
            compressed_channels: 12,
        }
    }

    /// Full-scale preset with a 320-channel concatenated feature map.
    pub fn full() -> Self {
        BackboneConfig {
            base_channels: 32,
            stage_channels: [64, 128, 128],
            blocks: [3, 16, 3, 3],
            compressed_channels: 12,
        }
    }

    pub fn cat_channels(&self) -> usize {
        self.stage_channels.iter().sum()
    }
}

/// Quarter-resolution features for one image.
#[derive(Debug)]
pub struct FeatureBundle<T: Scalar> {
    /// Second-stage output.
    pub s2: Tensor<T>,
    /// Third-stage output (dilation 1).
    pub s3: Tensor<T>,
    /// Fourth-stage output (dilation 2).
    pub s4: Tensor<T>,
    /// Channel concatenation of s2, s3, s4.
    pub cat: Tensor<T>,
    /// 12-channel compression of `cat`.
    pub compressed: Tensor<T>,
}

/// Residual block: two 3x3 convolutions with batch norm, identity shortcut,
/// no activation after the addition. The first convolution carries the
/// stride; a 1x1 projection aligns the shortcut when shape changes.
struct BasicBlock<T: Scalar> {
    conv1: ConvBnAct2d<T>,
    conv2: Conv2dLayer<T>,
    bn2: BatchNormLayer<T>,
    down: Option<(Conv2dLayer<T>, BatchNormLayer<T>)>,
}

impl<T: Scalar> BasicBlock<T> {
    fn new(rng: &mut impl Rng, ci: usize, co: usize, stride: usize, dilation: usize) -> Self {
        let spec1 = Conv2dSpec::new(stride, dilation, dilation);
        let spec2 = Conv2dSpec::new(1, dilation, dilation);
        let conv1 = ConvBnAct2d::new(rng, ci, co, (3, 3), spec1);
        let conv2 = Conv2dLayer::new(rng, co, co, (3, 3), spec2, false);
        let bn2 = BatchNormLayer::new(co);
        let down = (stride != 1 || ci != co).then(|| {
            (
                Conv2dLayer::new(rng, ci, co, (1, 1), Conv2dSpec::new(stride, 0, 1), false),
                BatchNormLayer::new(co),
            )
        });
        BasicBlock {
            conv1,
            conv2,
            bn2,
            down,
        }
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv1.forward(tape, x, mode)?;
        let y = self.conv2.forward(tape, &y)?;
        let y = self.bn2.forward(tape, &y, mode)?;
        let idn = match self.down.as_mut() {
            Some((conv, bn)) => {
                let p = conv.forward(tape, x)?;
                bn.forward(tape, &p, mode)?
            }
            None => x.clone(),
        };
        add(tape, &y, &idn)
    }
}

impl<T: Scalar> Layer<T> for BasicBlock<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = self.down.as_mut() {
            conv.visit_params(&join(prefix, "down.conv"), f);
            bn.visit_params(&join(prefix, "down.bn"), f);
        }
    }
    fn collect_state(&self, prefix: &str, out: &mut StateMap<T>) {
        self.conv1.collect_state(&join(prefix, "conv1"), out);
        self.conv2.collect_state(&join(prefix, "conv2"), out);
        self.bn2.collect_state(&join(prefix, "bn2"), out);
        if let Some((conv, bn)) = self.down.as_ref() {
            conv.collect_state(&join(prefix, "down.conv"), out);
            bn.collect_state(&join(prefix, "down.bn"), out);
        }
    }
    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<()> {
        self.conv1.load_state(&join(prefix, "conv1"), src)?;
        self.conv2.load_state(&join(prefix, "conv2"), src)?;
        self.bn2.load_state(&join(prefix, "bn2"), src)?;
        if let Some((conv, bn)) = self.down.as_mut() {
            conv.load_state(&join(prefix, "down.conv"), src)?;
            bn.load_state(&join(prefix, "down.bn"), src)?;
        }
        Ok(())
    }
}

fn stage<T: Scalar>(
    rng: &mut impl Rng,
    ci: usize,
    co: usize,
    count: usize,
    stride: usize,
    dilation: usize,
) -> Vec<BasicBlock<T>> {
    let mut blocks = Vec::with_capacity(count);
    blocks.push(BasicBlock::new(rng, ci, co, stride, dilation));
    for _ in 1..count {
        blocks.push(BasicBlock::new(rng, co, co, 1, dilation));
    }
    blocks
}

/// Shared-weight feature extractor. Stem downsamples to 1/2, the second stage
/// to 1/4; the last two stages hold resolution with dilations 1 and 2. The
/// outputs of the final three stages are concatenated and compressed to 12
/// channels for the correlation volumes.
pub struct Backbone<T: Scalar> {
    cfg: BackboneConfig,
    stem: Vec<ConvBnAct2d<T>>,
    layer1: Vec<BasicBlock<T>>,
    layer2: Vec<BasicBlock<T>>,
    layer3: Vec<BasicBlock<T>>,
    layer4: Vec<BasicBlock<T>>,
    compress: ConvBnAct2d<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(rng: &mut impl Rng, cfg: BackboneConfig) -> Self {
        let b = cfg.base_channels;
        let [c2, c3, c4] = cfg.stage_channels;
        let stem = vec![
            ConvBnAct2d::new(rng, 3, b, (3, 3), Conv2dSpec::new(2, 1, 1)),
            ConvBnAct2d::new(rng, b, b, (3, 3), Conv2dSpec::new(1, 1, 1)),
            ConvBnAct2d::new(rng, b, b, (3, 3), Conv2dSpec::new(1, 1, 1)),
        ];
        let layer1 = stage(rng, b, b, cfg.blocks[0], 1, 1);
        let layer2 = stage(rng, b, c2, cfg.blocks[1], 2, 1);
        let layer3 = stage(rng, c2, c3, cfg.blocks[2], 1, 1);
        let layer4 = stage(rng, c3, c4, cfg.blocks[3], 1, 2);
        let compress = ConvBnAct2d::new(
            rng,
            cfg.cat_channels(),
            cfg.compressed_channels,
            (3, 3),
            Conv2dSpec::new(1, 1, 1),
        );
        Backbone {
            cfg,
            stem,
            layer1,
            layer2,
            layer3,
            layer4,
            compress,
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Compress a concatenated feature map to the correlation channel count.
    pub fn compress(&mut self, tape: &mut Tape<T>, cat: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [_, c, _, _] = cat.dims::<4>()?;
        if c != self.cfg.cat_channels() {
            return Err(Error::shape(format!(
                "compress: input has {} channels, backbone produces {}",
                c,
                self.cfg.cat_channels()
            )));
        }
        self.compress.forward(tape, cat, mode)
    }

    /// Extract the feature bundle for one image batch `[B, 3, H, W]`.
    pub fn extract(&mut self, tape: &mut Tape<T>, image: &Tensor<T>, mode: Mode) -> Result<FeatureBundle<T>> {
        let [_, c, h, w] = image.dims::<4>()?;
        if c != 3 {
            return Err(Error::shape(format!(
                "extract: expected 3 input channels, got {}",
                c
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "extract: image extents {}x{} must be multiples of 4",
                h, w
            )));
        }
        let mut x = image.clone();
        for block in &mut self.stem {
            x = block.forward(tape, &x, mode)?;
        }
        for block in &mut self.layer1 {
            x = block.forward(tape, &x, mode)?;
        }
        let mut s2 = x;
        for block in &mut self.layer2 {
            s2 = block.forward(tape, &s2, mode)?;
        }
        let mut s3 = s2.clone();
        for block in &mut self.layer3 {
            s3 = block.forward(tape, &s3, mode)?;
        }
        let mut s4 = s3.clone();
        for block in &mut self.layer4 {
            s4 = block.forward(tape, &s4, mode)?;
        }
        let cat = concat_channels(tape, &[&s2, &s3, &s4])?;
        let pre = self.compress.conv.forward(tape, &cat)?;
        let pre = self.compress.bn.forward(tape, &pre, mode)?;
        let compressed = leaky_relu(tape, &pre, cast::<T>(crate::layers::LEAKY_SLOPE));
        Ok(FeatureBundle {
            s2,
            s3,
            s4,
            cat,
            compressed,
        })
    }

    /// Extract both views with the same weights.
    pub fn extract_pair(
        &mut self,
        tape: &mut Tape<T>,
        left: &Tensor<T>,
        right: &Tensor<T>,
        mode: Mode,
    ) -> Result<(FeatureBundle<T>, FeatureBundle<T>)> {
        let l = self.extract(tape, left, mode)?;
        let r = self.extract(tape, right, mode)?;
        Ok((l, r))
    }
}

impl<T: Scalar> Layer<T> for Backbone<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, b) in self.stem.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("stem.{}", i)), f);
        }
        for (name, blocks) in [
            ("layer1", &mut self.layer1),
            ("layer2", &mut self.layer2),
            ("layer3", &mut self.layer3),
            ("layer4", &mut self.layer4),
        ] {
            for (i, b) in blocks.iter_mut().enumerate() {
                b.visit_params(&join(prefix, &format!("{}.{}", name, i)), f);
            }
        }
        self.compress.visit_params(&join(prefix, "compress"), f);
    }
    fn collect_state(&self, prefix: &str, out: &mut StateMap<T>) {
        for (i, b) in self.stem.iter().enumerate() {
            b.collect_state(&join(prefix, &format!("stem.{}", i)), out);
        }
        for (name, blocks) in [
            ("layer1", &self.layer1),
            ("layer2", &self.layer2),
            ("layer3", &self.layer3),
            ("layer4", &self.layer4),
        ] {
            for (i, b) in blocks.iter().enumerate() {
                b.collect_state(&join(prefix, &format!("{}.{}", name, i)), out);
            }
        }
        self.compress.collect_state(&join(prefix, "compress"), out);
    }
    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<()> {
        for (i, b) in self.stem.iter_mut().enumerate() {
            b.load_state(&join(prefix, &format!("stem.{}", i)), src)?;
        }
        for (name, blocks) in [
            ("layer1", &mut self.layer1),
            ("layer2", &mut self.layer2),
            ("layer3", &mut self.layer3),
            ("layer4", &mut self.layer4),
        ] {
            for (i, b) in blocks.iter_mut().enumerate() {
                b.load_state(&join(prefix, &format!("{}.{}", name, i)), src)?;
            }
        }
        self.compress.load_state(&join(prefix, "compress"), src)
    }
}
