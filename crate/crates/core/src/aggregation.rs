//! Cost aggregation: two 3-D hourglass networks run in parallel over the two
//! cost volumes, and the lower branch's decoder features are fused with the
//! upper branch's same-scale decoder output through a light coupling module.
//! The aggregated volume is the sum of the two single-channel branch heads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{join, Conv3dLayer, ConvBnAct3d, DeconvBn3d, Layer, StateMap};
use crate::ops::{add, crop_dim2, pad_dim2, Conv3dSpec, Mode};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{same_shape, Tensor};

/// Shared shape of the two branch hourglasses.
#[derive(Clone, Copy, Debug)]
pub struct HourglassConfig {
    /// Cost-volume channels entering the upper branch.
    pub upper_in: usize,
    /// Cost-volume channels entering the lower branch.
    pub lower_in: usize,
    /// Encoder widths per level; `channels[0]` is also the width carried by
    /// the projection, the final decoder stage, and the branch head input.
    pub channels: [usize; 3],
    /// Which decoder scales couple lower onto upper output (coarse to fine).
    pub coupling_mask: [bool; 3],
}

impl HourglassConfig {
    pub fn toy(upper_in: usize, lower_in: usize, coupling_mask: [bool; 3]) -> Self {
        HourglassConfig {
            upper_in,
            lower_in,
            channels: [8, 16, 32],
            coupling_mask,
        }
    }

    /// Channel width of each decoder-scale output, coarse to fine.
    pub fn scale_channels(&self) -> [usize; 3] {
        [self.channels[1], self.channels[0], self.channels[0]]
    }
}

/// Fusion of same-scale geometry features from the two branches:
/// `fused = f1(f2(g_lower) + g_upper) + g_lower`, where `f1` and `f2` are
/// shape-preserving 1x3x3 convolutions (no kernel extent along disparity).
pub struct Coupler<T: Scalar> {
    pub f1: Conv3dLayer<T>,
    pub f2: Conv3dLayer<T>,
}

impl<T: Scalar> Coupler<T> {
    pub fn new(rng: &mut impl Rng, channels: usize) -> Self {
        let spec = Conv3dSpec {
            stride: (1, 1, 1),
            pad: (0, 1, 1),
        };
        Coupler {
            f1: Conv3dLayer::new(rng, channels, channels, (1, 3, 3), spec, true),
            f2: Conv3dLayer::new(rng, channels, channels, (1, 3, 3), spec, true),
        }
    }

    pub fn couple(
        &self,
        tape: &mut Tape<T>,
        g_upper: &Tensor<T>,
        g_lower: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        same_shape(g_upper, g_lower, "couple branch features")?;
        let mixed = self.f2.forward(tape, g_lower)?;
        let mixed = add(tape, &mixed, g_upper)?;
        let mixed = self.f1.forward(tape, &mixed)?;
        add(tape, &mixed, g_lower)
    }
}

impl<T: Scalar> Layer<T> for Coupler<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.f1.visit_params(&join(prefix, "f1"), f);
        self.f2.visit_params(&join(prefix, "f2"), f);
    }
    fn collect_state(&self, prefix: &str, out: &mut StateMap<T>) {
        self.f1.collect_state(&join(prefix, "f1"), out);
        self.f2.collect_state(&join(prefix, "f2"), out);
    }
    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<()> {
        self.f1.load_state(&join(prefix, "f1"), src)?;
        self.f2.load_state(&join(prefix, "f2"), src)
    }
}

/// One 3-D hourglass: projection, three stride-2 encoder levels, three
/// transposed-conv decoder stages with additive encoder skips, and a
/// single-channel regression head.
pub struct Hourglass<T: Scalar> {
    proj: ConvBnAct3d<T>,
    enc: Vec<(ConvBnAct3d<T>, ConvBnAct3d<T>)>,
    dec: Vec<(DeconvBn3d<T>, ConvBnAct3d<T>)>,
    head: Conv3dLayer<T>,
    /// Additive encoder-decoder skips; disabled only by diagnostics.
    pub use_skips: bool,
}

impl<T: Scalar> Hourglass<T> {
    pub fn new(rng: &mut impl Rng, in_channels: usize, channels: [usize; 3]) -> Self {
        let [c0, c1, c2] = channels;
        let s1 = Conv3dSpec::new(1, 1);
        let s2 = Conv3dSpec::new(2, 1);
        let proj = ConvBnAct3d::new(rng, in_channels, c0, (3, 3, 3), s1);
        let enc = vec![
            (
                ConvBnAct3d::new(rng, c0, c0, (3, 3, 3), s2),
                ConvBnAct3d::new(rng, c0, c0, (3, 3, 3), s1),
            ),
            (
                ConvBnAct3d::new(rng, c0, c1, (3, 3, 3), s2),
                ConvBnAct3d::new(rng, c1, c1, (3, 3, 3), s1),
            ),
            (
                ConvBnAct3d::new(rng, c1, c2, (3, 3, 3), s2),
                ConvBnAct3d::new(rng, c2, c2, (3, 3, 3), s1),
            ),
        ];
        let dec = vec![
            (
                DeconvBn3d::new(rng, c2, c1, (4, 4, 4), s2),
                ConvBnAct3d::new(rng, c1, c1, (3, 3, 3), s1),
            ),
            (
                DeconvBn3d::new(rng, c1, c0, (4, 4, 4), s2),
                ConvBnAct3d::new(rng, c0, c0, (3, 3, 3), s1),
            ),
            (
                DeconvBn3d::new(rng, c0, c0, (4, 4, 4), s2),
                ConvBnAct3d::new(rng, c0, c0, (3, 3, 3), s1),
            ),
        ];
        let head = Conv3dLayer::new(rng, c0, 1, (3, 3, 3), s1, true);
        Hourglass {
            proj,
            enc,
            dec,
            head,
            use_skips: true,
        }
    }

    /// Project the volume and run the encoder. Returns the projected base and
    /// the three level outputs, fine to coarse.
    pub fn encode(
        &mut self,
        tape: &mut Tape<T>,
        volume: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, [Tensor<T>; 3])> {
        let [_, _, d, h, w] = volume.dims::<5>()?;
        if d % 8 != 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::shape(format!(
                "aggregation: volume extents ({}, {}, {}) must be multiples of 8",
                d, h, w
            )));
        }
        let base = self.proj.forward(tape, volume, mode)?;
        let mut x = base.clone();
        let mut levels = Vec::with_capacity(3);
        for (down, post) in self.enc.iter_mut() {
            x = down.forward(tape, &x, mode)?;
            x = post.forward(tape, &x, mode)?;
            levels.push(x.clone());
        }
        let levels: [Tensor<T>; 3] = levels.try_into().expect("three encoder levels");
        Ok((base, levels))
    }

    /// Run the decoder. `hook` sees each stage's output (coarse to fine) and
    /// its return value feeds the next stage, which lets a caller fuse in
    /// features from another branch. Returns the final stage output.
    pub fn decode(
        &mut self,
        tape: &mut Tape<T>,
        base: &Tensor<T>,
        levels: &[Tensor<T>; 3],
        mode: Mode,
        hook: &mut dyn FnMut(&mut Tape<T>, usize, Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut x = levels[2].clone();
        for (stage, (up, conv)) in self.dec.iter_mut().enumerate() {
            let skip = match stage {
                0 => &levels[1],
                1 => &levels[0],
                _ => base,
            };
            let mut y = up.forward(tape, &x, mode)?;
            if self.use_skips {
                same_shape(&y, skip, "hourglass skip connection")?;
                y = add(tape, &y, skip)?;
            }
            let y = conv.forward(tape, &y, mode)?;
            x = hook(tape, stage, y)?;
        }
        Ok(x)
    }

    /// Reduce decoder features to a single-channel cost slice.
    pub fn regress_head(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.head.forward(tape, x)
    }

    /// Full pass with an identity hook: encode, decode, head.
    pub fn run(&mut self, tape: &mut Tape<T>, volume: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (base, levels) = self.encode(tape, volume, mode)?;
        let out = self.decode(tape, &base, &levels, mode, &mut |_, _, y| Ok(y))?;
        self.regress_head(tape, &out)
    }
}

impl<T: Scalar> Layer<T> for Hourglass<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.proj.visit_params(&join(prefix, "proj"), f);
        for (i, (a, b)) in self.enc.iter_mut().enumerate() {
            a.visit_params(&join(prefix, &format!("enc.{}.down", i)), f);
            b.visit_params(&join(prefix, &format!("enc.{}.post", i)), f);
        }
        for (i, (up, conv)) in self.dec.iter_mut().enumerate() {
            up.visit_params(&join(prefix, &format!("dec.{}.up", i)), f);
            conv.visit_params(&join(prefix, &format!("dec.{}.post", i)), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }
    fn collect_state(&self, prefix: &str, out: &mut StateMap<T>) {
        self.proj.collect_state(&join(prefix, "proj"), out);
        for (i, (a, b)) in self.enc.iter().enumerate() {
            a.collect_state(&join(prefix, &format!("enc.{}.down", i)), out);
            b.collect_state(&join(prefix, &format!("enc.{}.post", i)), out);
        }
        for (i, (up, conv)) in self.dec.iter().enumerate() {
            up.collect_state(&join(prefix, &format!("dec.{}.up", i)), out);
            conv.collect_state(&join(prefix, &format!("dec.{}.post", i)), out);
        }
        self.head.collect_state(&join(prefix, "head"), out);
    }
    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<()> {
        self.proj.load_state(&join(prefix, "proj"), src)?;
        for (i, (a, b)) in self.enc.iter_mut().enumerate() {
            a.load_state(&join(prefix, &format!("enc.{}.down", i)), src)?;
            b.load_state(&join(prefix, &format!("enc.{}.post", i)), src)?;
        }
        for (i, (up, conv)) in self.dec.iter_mut().enumerate() {
            up.load_state(&join(prefix, &format!("dec.{}.up", i)), src)?;
            conv.load_state(&join(prefix, &format!("dec.{}.post", i)), src)?;
        }
        self.head.load_state(&join(prefix, "head"), src)
    }
}

fn pad_to_multiple_of_8(d: usize) -> usize {
    (8 - d % 8) % 8
}

/// The two coupled hourglasses. The upper branch decodes independently; the
/// lower branch fuses the upper branch's same-scale decoder output at every
/// scale enabled in the coupling mask. The aggregated volume is the sum of
/// the branch heads.
pub struct DualAggregation<T: Scalar> {
    pub upper: Hourglass<T>,
    pub lower: Hourglass<T>,
    couplers: Vec<Option<Coupler<T>>>,
    cfg: HourglassConfig,
}

impl<T: Scalar> DualAggregation<T> {
    pub fn new(rng: &mut impl Rng, cfg: HourglassConfig) -> Self {
        let upper = Hourglass::new(rng, cfg.upper_in, cfg.channels);
        let lower = Hourglass::new(rng, cfg.lower_in, cfg.channels);
        let scale_ch = cfg.scale_channels();
        let couplers = (0..3)
            .map(|s| cfg.coupling_mask[s].then(|| Coupler::new(rng, scale_ch[s])))
            .collect();
        DualAggregation {
            upper,
            lower,
            couplers,
            cfg,
        }
    }

    pub fn config(&self) -> &HourglassConfig {
        &self.cfg
    }

    /// Aggregate the two volumes into `[B, 1, Dq, H, W]`. The disparity axis
    /// is zero-padded up to a multiple of 8 for the pyramid and cropped back.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        upper_vol: &Tensor<T>,
        lower_vol: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let [_, _, dq, h, w] = upper_vol.dims::<5>()?;
        let [_, _, dql, hl, wl] = lower_vol.dims::<5>()?;
        if (dq, h, w) != (dql, hl, wl) {
            return Err(Error::shape(format!(
                "aggregation: branch volumes disagree on extents ({},{},{}) vs ({},{},{})",
                dq, h, w, dql, hl, wl
            )));
        }
        let extra = pad_to_multiple_of_8(dq);
        let upper_vol = pad_dim2(tape, upper_vol, extra)?;
        let lower_vol = pad_dim2(tape, lower_vol, extra)?;

        let (u_base, u_levels) = self.upper.encode(tape, &upper_vol, mode)?;
        let mut upper_scales: Vec<Tensor<T>> = Vec::with_capacity(3);
        let u_out = self.upper.decode(tape, &u_base, &u_levels, mode, &mut |_, _, y| {
            upper_scales.push(y.clone());
            Ok(y)
        })?;
        let u_head = self.upper.regress_head(tape, &u_out)?;

        let (l_base, l_levels) = self.lower.encode(tape, &lower_vol, mode)?;
        let couplers = &self.couplers;
        let l_out = self
            .lower
            .decode(tape, &l_base, &l_levels, mode, &mut |t, stage, y| {
                match couplers[stage].as_ref() {
                    Some(c) => c.couple(t, &upper_scales[stage], &y),
                    None => Ok(y),
                }
            })?;
        let l_head = self.lower.regress_head(tape, &l_out)?;

        let summed = add(tape, &u_head, &l_head)?;
        crop_dim2(tape, &summed, dq)
    }
}

impl<T: Scalar> Layer<T> for DualAggregation<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.upper.visit_params(&join(prefix, "upper"), f);
        self.lower.visit_params(&join(prefix, "lower"), f);
        for (i, c) in self.couplers.iter_mut().enumerate() {
            if let Some(c) = c {
                c.visit_params(&join(prefix, &format!("couple.{}", i)), f);
            }
        }
    }
    fn collect_state(&self, prefix: &str, out: &mut StateMap<T>) {
        self.upper.collect_state(&join(prefix, "upper"), out);
        self.lower.collect_state(&join(prefix, "lower"), out);
        for (i, c) in self.couplers.iter().enumerate() {
            if let Some(c) = c {
                c.collect_state(&join(prefix, &format!("couple.{}", i)), out);
            }
        }
    }
    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<()> {
        self.upper.load_state(&join(prefix, "upper"), src)?;
        self.lower.load_state(&join(prefix, "lower"), src)?;
        for (i, c) in self.couplers.iter_mut().enumerate() {
            if let Some(c) = c {
                c.load_state(&join(prefix, &format!("couple.{}", i)), src)?;
            }
        }
        Ok(())
    }
}

/// A single hourglass over one volume, for ablations against the dual form.
pub struct SingleAggregation<T: Scalar> {
    pub hourglass: Hourglass<T>,
}

impl<T: Scalar> SingleAggregation<T> {
    pub fn new(rng: &mut impl Rng, in_channels: usize, channels: [usize; 3]) -> Self {
        SingleAggregation {
            hourglass: Hourglass::new(rng, in_channels, channels),
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        volume: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let [_, _, dq, _, _] = volume.dims::<5>()?;
        let extra = pad_to_multiple_of_8(dq);
        let volume = pad_dim2(tape, volume, extra)?;
        let out = self.hourglass.run(tape, &volume, mode)?;
        crop_dim2(tape, &out, dq)
    }
}

impl<T: Scalar> Layer<T> for SingleAggregation<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.hourglass.visit_params(&join(prefix, "hourglass"), f);
    }
    fn collect_state(&self, prefix: &str, out: &mut StateMap<T>) {
        self.hourglass.collect_state(&join(prefix, "hourglass"), out);
    }
    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<()> {
        self.hourglass.load_state(&join(prefix, "hourglass"), src)
    }
}
