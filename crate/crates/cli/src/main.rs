//! Command-line front end: train, evaluate, infer, ablate, gradient-check,
//! and synthesize datasets. All diagnostics go to standard error; structured
//! output (CSV tables, metrics) goes to standard output or files under the
//! output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dualvol::checkpoint::load_checkpoint;
use dualvol::config::RunConfig;
use dualvol::data::{pfm, png};
use dualvol::harness::{
    ablate, ablation_csv, eval_csv, evaluate, gradcheck_suite, train, Dataset,
};
use dualvol::metrics::epe;
use dualvol::model::{ModelConfig, StereoModel};
use dualvol::ops::Mode;
use dualvol::supervision::validity_mask;
use dualvol::{Tape, Tensor, Tensor32};

#[derive(Parser)]
#[command(
    name = "dualvol",
    version,
    about = "Stereo disparity estimation with two coupled cost volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write `loss.csv`, checkpoints, and `model.dvol`.
    Train(CommonArgs),
    /// Score a checkpoint; prints per-sample and aggregate CSV rows.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Parameter file written by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Run one stereo pair through a checkpoint; writes PFM and PNG.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        /// Parameter file written by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Left RGB image (PNG).
        #[arg(long, value_name = "PATH")]
        left: PathBuf,
        /// Right RGB image (PNG).
        #[arg(long, value_name = "PATH")]
        right: PathBuf,
        /// Optional ground-truth disparity (PFM); prints EPE when given.
        #[arg(long, value_name = "PATH")]
        gt: Option<PathBuf>,
    },
    /// Train and score every architecture variant; prints the matrix CSV.
    Ablate(CommonArgs),
    /// Finite-difference audit of every gradient rule; nonzero exit on failure.
    Gradcheck(CommonArgs),
    /// Write a synthetic stereo dataset into the output directory.
    GenData(CommonArgs),
}

/// Flags shared by every subcommand. Precedence: built-in defaults, then
/// `--config` file entries, then explicit flags.
#[derive(Args)]
struct CommonArgs {
    /// Plain-text key=value configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// RNG seed for init, data synthesis, and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Disparity search range; multiple of 4.
    #[arg(long)]
    dmax: Option<usize>,
    /// Correlation group count.
    #[arg(long)]
    ng: Option<usize>,
    /// Upper volume kind: gwc-dot | gwc-sub | norm-corr | concat.
    #[arg(long)]
    upper: Option<String>,
    /// Lower volume kind; must differ from --upper in dual mode.
    #[arg(long)]
    lower: Option<String>,
    /// Coupling mask over the three decoder scales, e.g. 111 or 100.
    #[arg(long)]
    coupling: Option<String>,
    /// Optimization step budget.
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Channel preset: toy | full.
    #[arg(long)]
    preset: Option<String>,
    /// Aggregation layout: dual | single.
    #[arg(long)]
    arch: Option<String>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Samples per optimization step.
    #[arg(long)]
    batch: Option<usize>,
    /// Image height; multiple of 32.
    #[arg(long)]
    height: Option<usize>,
    /// Image width; multiple of 32.
    #[arg(long)]
    width: Option<usize>,
    /// Synthetic dataset size.
    #[arg(long)]
    samples: Option<usize>,
    /// Checkpoint interval in steps.
    #[arg(long)]
    ckpt_every: Option<usize>,
    /// Directory of saved samples; synthetic data is used when absent.
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

impl CommonArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let mut put = |key: &str, value: Option<String>| -> Result<()> {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
            Ok(())
        };
        put("seed", self.seed.map(|v| v.to_string()))?;
        put("dmax", self.dmax.map(|v| v.to_string()))?;
        put("ng", self.ng.map(|v| v.to_string()))?;
        put("upper", self.upper.clone())?;
        put("lower", self.lower.clone())?;
        put("coupling", self.coupling.clone())?;
        put("steps", self.steps.map(|v| v.to_string()))?;
        put("out", self.out.as_ref().map(|v| v.display().to_string()))?;
        put("preset", self.preset.clone())?;
        put("arch", self.arch.clone())?;
        put("lr", self.lr.map(|v| v.to_string()))?;
        put("batch", self.batch.map(|v| v.to_string()))?;
        put("height", self.height.map(|v| v.to_string()))?;
        put("width", self.width.map(|v| v.to_string()))?;
        put("samples", self.samples.map(|v| v.to_string()))?;
        put("ckpt_every", self.ckpt_every.map(|v| v.to_string()))?;
        put(
            "data_dir",
            self.data_dir.as_ref().map(|v| v.display().to_string()),
        )?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_model(cfg: &RunConfig, checkpoint: &PathBuf) -> Result<StereoModel<f32>> {
    let state = load_checkpoint::<f32>(checkpoint)?;
    let mut model = StereoModel::seeded(cfg.seed, ModelConfig::from_run(cfg)?)?;
    model
        .restore(state)
        .with_context(|| format!("checkpoint {} does not fit this config", checkpoint.display()))?;
    Ok(model)
}

fn dataset_for(cfg: &RunConfig) -> Result<Dataset<f32>> {
    Ok(match &cfg.data_dir {
        Some(dir) => Dataset::load_dir(dir)?,
        None => Dataset::synth(cfg)?,
    })
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (_, outcome) = train(cfg)?;
    eprintln!(
        "trained {} steps: final loss {:.6}, train EPE {:.4} px, D1 {:.3}% in {:.1}s",
        outcome.steps, outcome.final_loss, outcome.report.epe, outcome.report.d1, outcome.seconds
    );
    eprintln!(
        "wrote {} and {}",
        cfg.out.join("loss.csv").display(),
        cfg.out.join("model.dvol").display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &PathBuf) -> Result<()> {
    let mut model = load_model(cfg, checkpoint)?;
    let dataset = dataset_for(cfg)?;
    let (rows, aggregate) = evaluate(&mut model, &dataset, cfg.dmax)?;
    print!("{}", eval_csv(&rows, &aggregate));
    eprintln!(
        "evaluated {} samples: EPE {:.4} px, D1 {:.3}%",
        rows.len(),
        aggregate.epe,
        aggregate.d1
    );
    Ok(())
}

fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &PathBuf,
    left: &PathBuf,
    right: &PathBuf,
    gt: Option<&PathBuf>,
) -> Result<()> {
    let mut model = load_model(cfg, checkpoint)?;
    let l = png::read_image_rgb::<f32>(left)?;
    let r = png::read_image_rgb::<f32>(right)?;
    let lb = Tensor::stack(&[&l])?;
    let rb = Tensor::stack(&[&r])?;
    let out = model.forward(&mut Tape::disabled(), &lb, &rb, Mode::Eval)?;

    let [_, h, w] = out.full.dims::<3>()?;
    let disparity: Tensor32 = out.full.reshaped(&[h, w])?;
    std::fs::create_dir_all(&cfg.out)?;
    let pfm_path = cfg.out.join("disparity.pfm");
    let png_path = cfg.out.join("disparity.png");
    pfm::write_pfm(&pfm_path, &disparity)?;
    png::write_viz_png8(&png_path, &disparity, cfg.dmax)?;
    eprintln!("wrote {} and {}", pfm_path.display(), png_path.display());

    if let Some(gt_path) = gt {
        let (gt_map, _) = pfm::read_pfm::<f32>(gt_path)?;
        let mask = validity_mask(&gt_map, cfg.dmax);
        println!("epe_px,{}", epe(&disparity, &gt_map, &mask)?);
    }
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let rows = ablate(cfg)?;
    print!("{}", ablation_csv(&rows));
    eprintln!("ablation finished: {} variants", rows.len());
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let entries = gradcheck_suite()?;
    println!("entry,max_rel_err,status");
    for e in &entries {
        println!(
            "{},{},{}",
            e.label,
            e.err,
            if e.pass { "pass" } else { "fail" }
        );
    }
    let failures = entries.iter().filter(|e| !e.pass).count();
    if failures > 0 {
        bail!("{failures} gradient rule(s) disagree with finite differences");
    }
    eprintln!("all {} gradient rules verified", entries.len());
    Ok(())
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let dataset = Dataset::<f32>::synth(cfg)?;
    Dataset::save_dir(&cfg.out, &dataset.samples)?;
    eprintln!(
        "wrote {} samples ({}x{}, dmax {}) to {}",
        dataset.len(),
        cfg.height,
        cfg.width,
        cfg.dmax,
        cfg.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(common) => cmd_train(&common.build()?),
        Command::Eval { common, checkpoint } => cmd_eval(&common.build()?, checkpoint),
        Command::Infer {
            common,
            checkpoint,
            left,
            right,
            gt,
        } => cmd_infer(&common.build()?, checkpoint, left, right, gt.as_ref()),
        Command::Ablate(common) => cmd_ablate(&common.build()?),
        Command::Gradcheck(common) => {
            // Validated for flag typo safety; the audit itself is fixed-shape.
            common.build()?;
            cmd_gradcheck()
        }
        Command::GenData(common) => cmd_gen_data(&common.build()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
