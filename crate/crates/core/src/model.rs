//! The full stereo network: shared-weight feature extraction, two cost
//! volumes aggregated by coupled hourglasses (or one volume by a single
//! hourglass), top-2 soft regression at quarter resolution, and learned
//! superpixel upsampling to full resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::config::{Arch, RunConfig};
use crate::costvol::{build_volume, VolumeKind};
use crate::aggregation::{DualAggregation, HourglassConfig, SingleAggregation};
use crate::error::{Error, Result};
use crate::layers::{join, Conv2dLayer, ConvBnAct2d, Layer, StateMap};
use crate::ops::{Conv2dSpec, Mode};
use crate::regression::{superpixel_upsample, topk_regress, SuperpixelWeights, TOP_K};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Which volumes are built and how they are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchSpec {
    Dual {
        upper: VolumeKind,
        lower: VolumeKind,
        coupling: [bool; 3],
    },
    Single {
        kind: VolumeKind,
    },
}

impl ArchSpec {
    /// Short functional label, e.g. `dual/gwc-dot+norm-corr/111`.
    pub fn label(&self) -> String {
        match self {
            ArchSpec::Dual {
                upper,
                lower,
                coupling,
            } => format!(
                "dual/{}+{}/{}",
                upper.as_str(),
                lower.as_str(),
                crate::config::coupling_string(*coupling)
            ),
            ArchSpec::Single { kind } => format!("single/{}", kind.as_str()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Hourglass encoder widths, coarse to fine.
    pub agg_channels: [usize; 3],
    pub dmax: usize,
    pub ng: usize,
    pub arch: ArchSpec,
}

impl ModelConfig {
    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (backbone, agg_channels) = match cfg.preset {
            crate::config::Preset::Toy => (BackboneConfig::toy(), [8, 16, 32]),
            crate::config::Preset::Full => (BackboneConfig::full(), [32, 64, 128]),
        };
        let arch = match cfg.arch {
            Arch::Dual => ArchSpec::Dual {
                upper: cfg.upper,
                lower: cfg.lower,
                coupling: cfg.coupling,
            },
            Arch::Single => ArchSpec::Single { kind: cfg.upper },
        };
        Ok(ModelConfig {
            backbone,
            agg_channels,
            dmax: cfg.dmax,
            ng: cfg.ng,
            arch,
        })
    }

    /// Default toy network (48 feature channels, Dmax 48, dual volumes).
    pub fn toy() -> Self {
        ModelConfig::from_run(&RunConfig::default()).expect("defaults validate")
    }

    /// Smallest network for finite-difference checks of the whole pipeline:
    /// Dmax 16 keeps the volume at 4 disparity steps. Train-mode batch norm
    /// needs at least 2 elements per channel at the deepest hourglass level,
    /// so the smallest usable image extent is 32x64.
    pub fn micro() -> Self {
        let mut cfg = ModelConfig::toy();
        cfg.dmax = 16;
        cfg
    }

    pub fn dq(&self) -> usize {
        self.dmax / 4
    }

    fn check(&self) -> Result<()> {
        if self.dmax == 0 || self.dmax % 4 != 0 {
            return Err(Error::config(format!(
                "dmax {} must be a positive multiple of 4",
                self.dmax
            )));
        }
        let cat = self.backbone.cat_channels();
        if self.ng == 0 || cat % self.ng != 0 {
            return Err(Error::config(format!(
                "ng: {} feature channels are not divisible into {} groups",
                cat, self.ng
            )));
        }
        if let ArchSpec::Dual { upper, lower, .. } = self.arch {
            if upper == lower {
                return Err(Error::config(format!(
                    "upper and lower volumes must differ, both are {}",
                    upper.as_str()
                )));
            }
        }
        Ok(())
    }
}

enum Aggregator<T: Scalar> {
    Dual(DualAggregation<T>),
    Single(SingleAggregation<T>),
}

/// Quarter- and full-resolution disparity predictions of one forward pass.
#[derive(Debug, Clone)]
pub struct DisparityPair<T: Scalar> {
    /// `[B, H/4, W/4]` in quarter-resolution disparity units.
    pub quarter: Tensor<T>,
    /// `[B, H, W]` in pixels.
    pub full: Tensor<T>,
}

pub struct StereoModel<T: Scalar> {
    cfg: ModelConfig,
    pub backbone: Backbone<T>,
    aggregator: Aggregator<T>,
    /// Superpixel weight head over the concatenated features: one 3x3
    /// conv-bn-relu, then a 1x1 conv onto 9 neighbors x 16 positions.
    spx_conv: ConvBnAct2d<T>,
    spx_head: Conv2dLayer<T>,
}

impl<T: Scalar> StereoModel<T> {
    pub fn new(rng: &mut impl Rng, cfg: ModelConfig) -> Result<Self> {
        cfg.check()?;
        let backbone = Backbone::new(rng, cfg.backbone);
        let aggregator = match cfg.arch {
            ArchSpec::Dual {
                upper,
                lower,
                coupling,
            } => Aggregator::Dual(DualAggregation::new(
                rng,
                HourglassConfig {
                    upper_in: upper.channels(cfg.ng),
                    lower_in: lower.channels(cfg.ng),
                    channels: cfg.agg_channels,
                    coupling_mask: coupling,
                },
            )),
            ArchSpec::Single { kind } => Aggregator::Single(SingleAggregation::new(
                rng,
                kind.channels(cfg.ng),
                cfg.agg_channels,
            )),
        };
        let cat = cfg.backbone.cat_channels();
        let spx_conv = ConvBnAct2d::new(rng, cat, 16, (3, 3), Conv2dSpec::new(1, 1, 1));
        let spx_head = Conv2dLayer::new(rng, 16, 144, (1, 1), Conv2dSpec::new(1, 0, 1), true);
        Ok(StereoModel {
            cfg,
            backbone,
            aggregator,
            spx_conv,
            spx_head,
        })
    }

    /// Deterministic construction from a seed.
    pub fn seeded(seed: u64, cfg: ModelConfig) -> Result<Self> {
        Self::new(&mut ChaCha8Rng::seed_from_u64(seed), cfg)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        left: &Tensor<T>,
        right: &Tensor<T>,
        mode: Mode,
    ) -> Result<DisparityPair<T>> {
        let [_, _, h, w] = left.dims::<4>()?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "model: image extents {}x{} must be multiples of 32",
                h, w
            )));
        }
        let (fl, fr) = self.backbone.extract_pair(tape, left, right, mode)?;
        let dq = self.cfg.dq();
        let ng = self.cfg.ng;

        // Group-wise volumes read the wide concatenated features; the
        // correlation and concat volumes read the 12-channel compression.
        let pick = |kind: VolumeKind| match kind {
            VolumeKind::GwcDot | VolumeKind::GwcSub => (&fl.cat, &fr.cat),
            VolumeKind::NormCorr | VolumeKind::Concat => (&fl.compressed, &fr.compressed),
        };

        let aggregated = match (&mut self.aggregator, self.cfg.arch) {
            (Aggregator::Dual(agg), ArchSpec::Dual { upper, lower, .. }) => {
                let (ul, ur) = pick(upper);
                let upper_vol = build_volume(tape, upper, ul, ur, ng, dq)?;
                let (ll, lr) = pick(lower);
                let lower_vol = build_volume(tape, lower, ll, lr, ng, dq)?;
                agg.forward(tape, &upper_vol, &lower_vol, mode)?
            }
            (Aggregator::Single(agg), ArchSpec::Single { kind }) => {
                let (vl, vr) = pick(kind);
                let volume = build_volume(tape, kind, vl, vr, ng, dq)?;
                agg.forward(tape, &volume, mode)?
            }
            _ => unreachable!("aggregator always matches the arch it was built from"),
        };

        let quarter = topk_regress(tape, &aggregated, TOP_K)?;

        let t = self.spx_conv.forward(tape, &fl.cat, mode)?;
        let logits = self.spx_head.forward(tape, &t)?;
        let weights = SuperpixelWeights::from_cell_logits(tape, &logits)?;
        let full = superpixel_upsample(tape, &quarter, &weights)?;
        Ok(DisparityPair { quarter, full })
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }

    pub fn state(&self) -> StateMap<T> {
        let mut out = StateMap::new();
        self.collect_state("", &mut out);
        out
    }

    /// Restore from a state map, consuming matched entries. Leftover
    /// entries mean the map came from a different architecture.
    pub fn restore(&mut self, mut state: StateMap<T>) -> Result<()> {
        self.load_state("", &mut state)?;
        if let Some(name) = state.keys().next() {
            return Err(Error::Checkpoint(format!(
                "state holds {} tensors the model did not ask for, e.g. {:?}",
                state.len(),
                name
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Layer<T> for StereoModel<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.backbone.visit_params(&join(prefix, "backbone"), f);
        match &mut self.aggregator {
            Aggregator::Dual(a) => a.visit_params(&join(prefix, "agg"), f),
            Aggregator::Single(a) => a.visit_params(&join(prefix, "agg"), f),
        }
        self.spx_conv.visit_params(&join(prefix, "spx.conv"), f);
        self.spx_head.visit_params(&join(prefix, "spx.head"), f);
    }

    fn collect_state(&self, prefix: &str, out: &mut StateMap<T>) {
        self.backbone.collect_state(&join(prefix, "backbone"), out);
        match &self.aggregator {
            Aggregator::Dual(a) => a.collect_state(&join(prefix, "agg"), out),
            Aggregator::Single(a) => a.collect_state(&join(prefix, "agg"), out),
        }
        self.spx_conv.collect_state(&join(prefix, "spx.conv"), out);
        self.spx_head.collect_state(&join(prefix, "spx.head"), out);
    }

    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<()> {
        self.backbone.load_state(&join(prefix, "backbone"), src)?;
        match &mut self.aggregator {
            Aggregator::Dual(a) => a.load_state(&join(prefix, "agg"), src)?,
            Aggregator::Single(a) => a.load_state(&join(prefix, "agg"), src)?,
        }
        self.spx_conv.load_state(&join(prefix, "spx.conv"), src)?;
        self.spx_head.load_state(&join(prefix, "spx.head"), src)
    }
}
