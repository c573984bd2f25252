//! Flat key=value run configuration. One parser backs both config files and
//! command-line overrides, so every knob has a single spelling, a single
//! validator, and file values can be overridden per flag.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::costvol::VolumeKind;
use crate::error::{Error, Result};

/// Backbone width preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Desk-scale widths for tests and short runs.
    Toy,
    /// Publication-scale widths; slow on a CPU, provided for completeness.
    Full,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "full" => Ok(Preset::Full),
            other => Err(Error::config(format!(
                "preset: expected toy|full, got {:?}",
                other
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Full => "full",
        }
    }
}

/// Whether the model aggregates two cost volumes or one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Dual,
    /// Single-volume variant; uses the `upper` kind and ignores `lower`
    /// and the coupling mask.
    Single,
}

impl Arch {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Arch::Dual),
            "single" => Ok(Arch::Single),
            other => Err(Error::config(format!(
                "arch: expected dual|single, got {:?}",
                other
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Dual => "dual",
            Arch::Single => "single",
        }
    }
}

pub fn parse_coupling(s: &str) -> Result<[bool; 3]> {
    let b: Vec<bool> = s
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(Error::config(format!(
                "coupling: expected three 0/1 flags like 111, got {:?}",
                other
            ))),
        })
        .collect::<Result<_>>()?;
    b.try_into()
        .map_err(|_| Error::config(format!("coupling: expected exactly 3 flags, got {:?}", s)))
}

pub fn coupling_string(mask: [bool; 3]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub preset: Preset,
    pub arch: Arch,
    pub dmax: usize,
    pub ng: usize,
    pub upper: VolumeKind,
    pub lower: VolumeKind,
    pub coupling: [bool; 3],
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub samples: usize,
    pub ckpt_every: usize,
    pub out: PathBuf,
    /// Directory of on-disk samples; synthesize in memory when absent.
    pub data_dir: Option<PathBuf>,
    /// Keys set explicitly (file or flag), so later layers can tell an
    /// untouched default from a deliberate choice.
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::Toy,
            arch: Arch::Dual,
            dmax: 48,
            ng: 4,
            upper: VolumeKind::GwcDot,
            lower: VolumeKind::NormCorr,
            coupling: [true, true, true],
            seed: 7,
            steps: 2000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch: 1,
            height: 64,
            width: 128,
            samples: 20,
            ckpt_every: 500,
            out: PathBuf::from("out"),
            data_dir: None,
            explicit: BTreeSet::new(),
        }
    }
}

impl RunConfig {
    /// Apply one key=value setting. Unknown keys are rejected so a typo in a
    /// config file cannot silently leave a default in place.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
            value
                .parse()
                .map_err(|_| Error::config(format!("{}: cannot parse {:?}", key, value)))
        }
        match key {
            "preset" => self.preset = Preset::parse(value)?,
            "arch" => self.arch = Arch::parse(value)?,
            "dmax" => self.dmax = num(key, value)?,
            "ng" => self.ng = num(key, value)?,
            "upper" => self.upper = VolumeKind::parse(value)?,
            "lower" => self.lower = VolumeKind::parse(value)?,
            "coupling" => self.coupling = parse_coupling(value)?,
            "seed" => self.seed = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "samples" => self.samples = num(key, value)?,
            "ckpt_every" => self.ckpt_every = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            other => {
                return Err(Error::config(format!(
                    "unknown configuration key {:?}",
                    other
                )))
            }
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Parse a config file of key=value lines ('#' starts a comment) on top
    /// of the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "{}:{}: expected key=value, got {:?}",
                    path.display(),
                    lineno + 1,
                    raw.trim()
                ))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("{}:{}: {}", path.display(), lineno + 1, e)))?;
        }
        Ok(())
    }

    /// Cross-field invariants; called once after all sources are merged.
    pub fn validate(&self) -> Result<()> {
        if self.dmax == 0 || self.dmax % 4 != 0 {
            return Err(Error::config(format!(
                "dmax: {} must be a positive multiple of 4",
                self.dmax
            )));
        }
        if self.arch == Arch::Dual && self.upper == self.lower {
            return Err(Error::config(format!(
                "upper and lower volumes must differ, both are {}",
                self.upper.as_str()
            )));
        }
        if self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::config(format!(
                "image extents {}x{} must be multiples of 32",
                self.height, self.width
            )));
        }
        let cat = match self.preset {
            Preset::Toy => crate::backbone::BackboneConfig::toy().cat_channels(),
            Preset::Full => crate::backbone::BackboneConfig::full().cat_channels(),
        };
        if self.ng == 0 || cat % self.ng != 0 {
            return Err(Error::config(format!(
                "ng: {} feature channels are not divisible into {} groups",
                cat, self.ng
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("lr: {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{}: {} must lie in [0, 1)", name, b)));
            }
        }
        if self.batch == 0 || self.samples == 0 {
            return Err(Error::config("batch and samples must be positive"));
        }
        if self.ckpt_every == 0 {
            return Err(Error::config("ckpt_every must be positive"));
        }
        Ok(())
    }
}
