//! Training, evaluation, and diagnostics glue shared by the command-line
//! tool and the integration tests: dataset loading, the Adam training loop
//! with loss logging and periodic checkpoints, pooled evaluation, the
//! architecture ablation matrix, and the finite-difference audit.

use std::cell::RefCell;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::Coupler;
use crate::checkpoint::save_checkpoint;
use crate::config::{coupling_string, Arch, RunConfig};
use crate::costvol::VolumeKind;
use crate::data::{png, synth_generate, SynthConfig, StereoSample};
use crate::data::pfm;
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::metrics::{bad_sigma, d1_rate, epe, EvalAccumulator, EvalReport};
use crate::model::{ArchSpec, ModelConfig, StereoModel};
use crate::ops::{self, Mode};
use crate::optim::Adam;
use crate::regression::{self, SuperpixelWeights};
use crate::scalar::Scalar;
use crate::supervision::{total_loss, LossWeights};
use crate::tape::{grad_check, grad_check_sampled, Tape};
use crate::tensor::Tensor;

/// Fixed thresholds reported by every evaluation.
pub const BAD_SIGMAS: [f64; 3] = [1.0, 2.0, 3.0];

// --- Dataset ----------------------------------------------------------------

pub struct Dataset<T: Scalar> {
    pub samples: Vec<StereoSample<T>>,
}

impl<T: Scalar> Dataset<T> {
    /// Synthesize the dataset described by the run configuration. The data
    /// stream is decorrelated from the model-init stream of the same seed.
    pub fn synth(cfg: &RunConfig) -> Result<Self> {
        let sc = SynthConfig::new(cfg.height, cfg.width, cfg.dmax)?;
        let samples = synth_generate(sc, cfg.seed.rotate_left(17) ^ 0xDA7A_5EED, cfg.samples)?;
        Ok(Dataset { samples })
    }

    /// Load samples written by [`Dataset::save_dir`]: groups of
    /// `NNNN_left.png`, `NNNN_right.png`, `NNNN_gt.pfm`, `NNNN_valid.png`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut stems: Vec<String> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix("_left.png").map(str::to_string)
            })
            .collect();
        stems.sort();
        if stems.is_empty() {
            return Err(Error::data(format!(
                "{}: no *_left.png samples found",
                dir.display()
            )));
        }
        let mut samples = Vec::with_capacity(stems.len());
        for stem in stems {
            let sample = StereoSample {
                left: png::read_image_rgb(&dir.join(format!("{stem}_left.png")))?,
                right: png::read_image_rgb(&dir.join(format!("{stem}_right.png")))?,
                d_gt: pfm::read_pfm(&dir.join(format!("{stem}_gt.pfm")))?.0,
                valid: png::read_mask_png8(&dir.join(format!("{stem}_valid.png")))?,
            };
            sample.validate()?;
            samples.push(sample);
        }
        Ok(Dataset { samples })
    }

    pub fn save_dir(dir: &Path, samples: &[StereoSample<T>]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, s) in samples.iter().enumerate() {
            png::write_rgb_png8(&dir.join(format!("{i:04}_left.png")), &s.left)?;
            png::write_rgb_png8(&dir.join(format!("{i:04}_right.png")), &s.right)?;
            pfm::write_pfm(&dir.join(format!("{i:04}_gt.pfm")), &s.d_gt)?;
            png::write_mask_png8(&dir.join(format!("{i:04}_valid.png")), &s.valid)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

// --- Training ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    /// Mean loss over the final stretch (up to 20 steps).
    pub final_loss: f64,
    /// Post-training evaluation over the training set.
    pub report: EvalReport,
    pub seconds: f64,
}

fn batch<T: Scalar>(
    dataset: &Dataset<T>,
    idx: &[usize],
    dmax: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
    let pick = |f: &dyn Fn(&StereoSample<T>) -> Tensor<T>| -> Result<Tensor<T>> {
        let parts: Vec<Tensor<T>> = idx.iter().map(|&i| f(&dataset.samples[i])).collect();
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::stack(&refs)
    };
    Ok((
        pick(&|s| s.left.clone())?,
        pick(&|s| s.right.clone())?,
        pick(&|s| s.d_gt.clone())?,
        pick(&|s| s.train_mask(dmax))?,
    ))
}

/// Run the optimization loop. `on_step` observes `(step, loss, batch EPE)`
/// after each update; checkpoints are written under `ckpt_dir` every
/// `cfg.ckpt_every` steps when a directory is given.
pub fn run_training(
    cfg: &RunConfig,
    dataset: &Dataset<f32>,
    model: &mut StereoModel<f32>,
    mut on_step: impl FnMut(usize, f64, f64),
    ckpt_dir: Option<&Path>,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::data("training needs at least one sample"));
    }
    if cfg.batch > dataset.len() {
        return Err(Error::config(format!(
            "batch {} exceeds dataset size {}",
            cfg.batch,
            dataset.len()
        )));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5806_5701_9E37_79B9);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let weights = LossWeights::default();
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        // Refill with a fresh epoch permutation; partial batches are
        // dropped so every step sees exactly cfg.batch samples.
        if order.len() < cfg.batch {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut shuffle_rng);
        }
        let idx: Vec<usize> = order.drain(..cfg.batch).collect();
        let (left, right, gt, mask) = batch(dataset, &idx, cfg.dmax)?;

        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &left, &right, Mode::Train)?;
        let (loss_t, _) = total_loss(&mut tape, &out.quarter, &out.full, &gt, &mask, weights)?;
        let loss = loss_t.item()?.to_f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = tape.backward(&loss_t)?;
        adam.step(model, &grads);
        losses.push(loss);

        let batch_epe = epe(&out.full, &gt, &mask).unwrap_or(f64::NAN);
        on_step(step, loss, batch_epe);

        if let Some(dir) = ckpt_dir {
            if (step + 1) % cfg.ckpt_every == 0 && step + 1 < cfg.steps {
                save_checkpoint(&dir.join(format!("ckpt_{:05}.dvol", step + 1)), &model.state())?;
            }
        }
    }
    Ok(losses)
}

/// Full training command: synthesizes or loads data, trains, logs
/// `loss.csv`, writes the final checkpoint, and evaluates on the training
/// set.
pub fn train(cfg: &RunConfig) -> Result<(StereoModel<f32>, TrainOutcome)> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    let dataset = match &cfg.data_dir {
        Some(dir) => Dataset::load_dir(dir)?,
        None => Dataset::synth(cfg)?,
    };
    let mut model = StereoModel::seeded(cfg.seed, ModelConfig::from_run(cfg)?)?;

    let start = Instant::now();
    let mut csv = std::fs::File::create(cfg.out.join("loss.csv"))?;
    writeln!(csv, "step,loss,epe_px")?;
    let losses = run_training(
        cfg,
        &dataset,
        &mut model,
        |step, loss, epe| {
            let _ = writeln!(csv, "{},{},{}", step, loss, epe);
        },
        Some(&cfg.out),
    )?;
    save_checkpoint(&cfg.out.join("model.dvol"), &model.state())?;

    let (_, report) = evaluate(&mut model, &dataset, cfg.dmax)?;
    let tail = &losses[losses.len().saturating_sub(20)..];
    Ok((
        model,
        TrainOutcome {
            steps: losses.len(),
            final_loss: tail.iter().sum::<f64>() / tail.len() as f64,
            report,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

// --- Evaluation ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SampleEval {
    pub index: usize,
    pub epe: f64,
    pub d1: f64,
    pub bad: [f64; 3],
    pub valid_pixels: usize,
}

/// Evaluate every sample and pool pixel statistics. The aggregate weighs
/// each valid pixel equally, so it equals the valid-pixel-weighted mean of
/// the per-sample rows.
pub fn evaluate(
    model: &mut StereoModel<f32>,
    dataset: &Dataset<f32>,
    dmax: usize,
) -> Result<(Vec<SampleEval>, EvalReport)> {
    if dataset.is_empty() {
        return Err(Error::data("evaluation needs at least one sample"));
    }
    let mut rows = Vec::with_capacity(dataset.len());
    let mut acc = EvalAccumulator::new(&BAD_SIGMAS);
    for (index, _) in dataset.samples.iter().enumerate() {
        let (left, right, gt, mask) = batch(dataset, &[index], dmax)?;
        let out = model.forward(&mut Tape::disabled(), &left, &right, Mode::Eval)?;
        let n = mask.data().iter().filter(|&&m| m != 0.0).count();
        let mut bad = [0.0; 3];
        for (k, &s) in BAD_SIGMAS.iter().enumerate() {
            bad[k] = bad_sigma(&out.full, &gt, &mask, s)?;
        }
        rows.push(SampleEval {
            index,
            epe: epe(&out.full, &gt, &mask)?,
            d1: d1_rate(&out.full, &gt, &mask)?,
            bad,
            valid_pixels: n,
        });
        acc.add(&out.full, &gt, &mask)?;
    }
    Ok((rows, acc.report()?))
}

pub fn eval_csv(rows: &[SampleEval], aggregate: &EvalReport) -> String {
    let mut s = String::from("sample,epe_px,d1_pct,bad1_pct,bad2_pct,bad3_pct,valid_pixels\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.index, r.epe, r.d1, r.bad[0], r.bad[1], r.bad[2], r.valid_pixels
        ));
    }
    s.push_str(&format!(
        "aggregate,{},{},{},{},{},{}\n",
        aggregate.epe,
        aggregate.d1,
        aggregate.bad[0].1,
        aggregate.bad[1].1,
        aggregate.bad[2].1,
        aggregate.valid_pixels
    ));
    s
}

// --- Ablation ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub coupling: String,
    pub upper: String,
    pub lower: String,
    pub final_loss: f64,
    pub epe: f64,
    pub d1: f64,
    pub bad: [f64; 3],
    pub seconds: f64,
}

/// The twelve studied variants: each cost volume alone, the uncoupled
/// baseline, all six volume pairings, and the coupling-depth sweep.
pub fn ablation_configs(base: &RunConfig) -> Vec<RunConfig> {
    use VolumeKind::*;
    let mut configs = Vec::new();
    let mut push = |arch: Arch, upper: VolumeKind, lower: VolumeKind, coupling: [bool; 3]| {
        let mut cfg = base.clone();
        cfg.arch = arch;
        cfg.upper = upper;
        cfg.lower = lower;
        cfg.coupling = coupling;
        configs.push(cfg);
    };
    push(Arch::Single, GwcDot, NormCorr, [false; 3]);
    push(Arch::Single, NormCorr, GwcDot, [false; 3]);
    push(Arch::Dual, GwcDot, NormCorr, [false; 3]);
    for (u, l) in [
        (GwcDot, GwcSub),
        (GwcDot, NormCorr),
        (GwcDot, Concat),
        (GwcSub, NormCorr),
        (GwcSub, Concat),
        (NormCorr, Concat),
    ] {
        push(Arch::Dual, u, l, [true; 3]);
    }
    for coupling in [
        [true, false, false],
        [true, true, false],
        [true, true, true],
    ] {
        push(Arch::Dual, GwcDot, NormCorr, coupling);
    }
    configs
}

/// Train every ablation variant for `base.steps` steps on one shared
/// dataset and evaluate each on it.
pub fn ablate(base: &RunConfig) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let dataset = match &base.data_dir {
        Some(dir) => Dataset::load_dir(dir)?,
        None => Dataset::synth(base)?,
    };
    let mut rows = Vec::new();
    for cfg in ablation_configs(base) {
        let model_cfg = ModelConfig::from_run(&cfg)?;
        let label = model_cfg.arch.label();
        let start = Instant::now();
        let mut model = StereoModel::seeded(cfg.seed, model_cfg.clone())
            .map_err(|e| Error::config(format!("{label}: {e}")))?;
        let losses = run_training(&cfg, &dataset, &mut model, |_, _, _| {}, None)
            .map_err(|e| Error::config(format!("{label}: {e}")))?;
        let (_, report) = evaluate(&mut model, &dataset, cfg.dmax)?;
        let tail = &losses[losses.len().saturating_sub(20)..];
        let (coupling, upper, lower) = match model_cfg.arch {
            ArchSpec::Dual {
                upper,
                lower,
                coupling,
            } => (
                coupling_string(coupling),
                upper.as_str().to_string(),
                lower.as_str().to_string(),
            ),
            ArchSpec::Single { kind } => ("-".into(), kind.as_str().to_string(), "-".into()),
        };
        rows.push(AblationRow {
            label,
            coupling,
            upper,
            lower,
            final_loss: tail.iter().sum::<f64>() / tail.len() as f64,
            epe: report.epe,
            d1: report.d1,
            bad: [report.bad[0].1, report.bad[1].1, report.bad[2].1],
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "architecture,coupling,upper,lower,loss,epe_px,d1_pct,bad1_pct,bad2_pct,bad3_pct,time_s\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.label,
            r.coupling,
            r.upper,
            r.lower,
            r.final_loss,
            r.epe,
            r.d1,
            r.bad[0],
            r.bad[1],
            r.bad[2],
            r.seconds
        ));
    }
    s
}

// --- Gradient audit -----------------------------------------------------------

pub const GRAD_TOL: f64 = 1e-4;
const EPS: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradEntry {
    pub label: &'static str,
    pub err: f64,
    pub pass: bool,
}

fn entry(label: &'static str, err: f64) -> GradEntry {
    GradEntry {
        label,
        err,
        pass: err < GRAD_TOL,
    }
}

type Fval = Tensor<f64>;

/// Reduce a tensor to a scalar with fixed random weights, so the check
/// exercises every output coordinate of the op under test.
fn pin<F>(seed: u64, f: F) -> impl Fn(&mut Tape<f64>, &Fval) -> Result<Fval>
where
    F: Fn(&mut Tape<f64>, &Fval) -> Result<Fval>,
{
    move |tape, x| {
        let y = f(tape, x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Tensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..1.0));
        let w = ops::mul(tape, &y, &r)?;
        Ok(ops::sum_all(tape, &w))
    }
}

fn rand_t(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Fval {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Finite-difference audit of every differentiable building block and the
/// assembled network, in f64 with central differences at eps 1e-4.
pub fn gradcheck_suite() -> Result<Vec<GradEntry>> {
    let mut out = Vec::new();

    // conv2d: input, weight, bias.
    {
        let x = rand_t(1, &[1, 2, 5, 6], -1.0, 1.0);
        let w = rand_t(2, &[3, 2, 3, 3], -0.5, 0.5);
        let b = rand_t(3, &[3], -0.5, 0.5);
        let spec = ops::Conv2dSpec::new(1, 1, 1);
        let mut err: f64 = 0.0;
        {
            let (w, b) = (w.clone(), b.clone());
            err = err.max(grad_check(
                &pin(10, move |t, x| ops::conv2d(t, x, &w, Some(&b), spec)),
                &x,
                EPS,
            )?);
        }
        {
            let (x, b) = (x.clone(), b.clone());
            err = err.max(grad_check(
                &pin(11, move |t, w| ops::conv2d(t, &x, w, Some(&b), spec)),
                &w,
                EPS,
            )?);
        }
        {
            let (x, w) = (x.clone(), w.clone());
            err = err.max(grad_check(
                &pin(12, move |t, b| ops::conv2d(t, &x, &w, Some(b), spec)),
                &b,
                EPS,
            )?);
        }
        out.push(entry("conv2d", err));
    }

    // conv3d: strided, padded.
    {
        let x = rand_t(4, &[1, 2, 4, 5, 5], -1.0, 1.0);
        let w = rand_t(5, &[2, 2, 3, 3, 3], -0.5, 0.5);
        let b = rand_t(6, &[2], -0.5, 0.5);
        let spec = ops::Conv3dSpec::new(2, 1);
        let mut err: f64 = 0.0;
        {
            let (w, b) = (w.clone(), b.clone());
            err = err.max(grad_check(
                &pin(13, move |t, x| ops::conv3d(t, x, &w, Some(&b), spec)),
                &x,
                EPS,
            )?);
        }
        {
            let x = x.clone();
            err = err.max(grad_check(
                &pin(14, move |t, w| ops::conv3d(t, &x, w, None, spec)),
                &w,
                EPS,
            )?);
        }
        out.push(entry("conv3d", err));
    }

    // conv3d_transposed: the 4^3 stride-2 upsampling shape.
    {
        let x = rand_t(7, &[1, 2, 2, 3, 3], -1.0, 1.0);
        let w = rand_t(8, &[2, 2, 4, 4, 4], -0.5, 0.5);
        let spec = ops::Conv3dSpec::new(2, 1);
        let mut err: f64 = 0.0;
        {
            let w = w.clone();
            err = err.max(grad_check(
                &pin(15, move |t, x| ops::conv3d_transposed(t, x, &w, None, spec)),
                &x,
                EPS,
            )?);
        }
        {
            let x = x.clone();
            err = err.max(grad_check(
                &pin(16, move |t, w| ops::conv3d_transposed(t, &x, w, None, spec)),
                &w,
                EPS,
            )?);
        }
        out.push(entry("conv3d_transposed", err));
    }

    // batch_norm in both modes, plus the affine parameters.
    {
        let x = rand_t(9, &[2, 3, 4, 5], -2.0, 2.0);
        let gamma = rand_t(17, &[3], 0.5, 1.5);
        let beta = rand_t(18, &[3], -0.5, 0.5);
        let mut err: f64 = 0.0;
        for mode in [Mode::Train, Mode::Eval] {
            let (gamma, beta) = (gamma.clone(), beta.clone());
            err = err.max(grad_check(
                &pin(19, move |t, x| {
                    let mut rm = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
                    let mut rv = Tensor::from_vec(&[3], vec![1.0, 0.5, 2.0]).unwrap();
                    ops::batch_norm(t, x, &gamma, &beta, &mut rm, &mut rv, mode)
                }),
                &x,
                EPS,
            )?);
        }
        {
            let (x, beta) = (x.clone(), beta.clone());
            err = err.max(grad_check(
                &pin(20, move |t, gamma| {
                    let mut rm = Tensor::zeros(&[3]);
                    let mut rv = Tensor::full(&[3], 1.0);
                    ops::batch_norm(t, &x, gamma, &beta, &mut rm, &mut rv, Mode::Train)
                }),
                &gamma,
                EPS,
            )?);
        }
        {
            let (x, gamma) = (x.clone(), gamma.clone());
            err = err.max(grad_check(
                &pin(21, move |t, beta| {
                    let mut rm = Tensor::zeros(&[3]);
                    let mut rv = Tensor::full(&[3], 1.0);
                    ops::batch_norm(t, &x, &gamma, beta, &mut rm, &mut rv, Mode::Train)
                }),
                &beta,
                EPS,
            )?);
        }
        out.push(entry("batch_norm", err));
    }

    // Activations, on inputs clear of the kink at zero.
    {
        let x = Tensor::from_fn(&[2, 3, 4], |i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            sign * (0.2 + 0.05 * i as f64)
        });
        let mut err = grad_check(
            &pin(22, |t: &mut Tape<f64>, x: &Fval| Ok(ops::relu(t, x))),
            &x,
            EPS,
        )?;
        err = err.max(grad_check(
            &pin(23, |t: &mut Tape<f64>, x: &Fval| Ok(ops::leaky_relu(t, x, 0.01))),
            &x,
            EPS,
        )?);
        out.push(entry("activations", err));
    }

    // softmax_axis over a middle axis.
    {
        let x = rand_t(24, &[2, 5, 3], -2.0, 2.0);
        let err = grad_check(&pin(25, |t: &mut Tape<f64>, x: &Fval| ops::softmax_axis(t, x, 1)), &x, EPS)?;
        out.push(entry("softmax_axis", err));
    }

    // smooth_l1 in the quadratic and linear regimes, clear of |e| = 1.
    {
        let target = Tensor::zeros(&[2, 3, 3]);
        let mask = Tensor::from_fn(&[2, 3, 3], |i| if i % 4 == 0 { 0.0 } else { 1.0 });
        let mut err: f64 = 0.0;
        for (seed, lo, hi) in [(26, -0.8, 0.8), (27, 1.2, 2.0)] {
            let pred = rand_t(seed, &[2, 3, 3], lo, hi);
            let (target2, mask2) = (target.clone(), mask.clone());
            err = err.max(grad_check(
                &move |t: &mut Tape<f64>, p: &Fval| ops::smooth_l1(t, p, &target2, &mask2),
                &pred,
                EPS,
            )?);
            let pred2 = pred.clone();
            let mask3 = mask.clone();
            err = err.max(grad_check(
                &move |t: &mut Tape<f64>, tg: &Fval| ops::smooth_l1(t, &pred2, tg, &mask3),
                &target,
                EPS,
            )?);
        }
        out.push(entry("smooth_l1", err));
    }

    // The coupling block: both inputs and its first convolution's weight.
    {
        let coupler = RefCell::new(Coupler::<f64>::new(
            &mut ChaCha8Rng::seed_from_u64(28),
            4,
        ));
        let gu = rand_t(29, &[1, 4, 2, 4, 5], -1.0, 1.0);
        let gl = rand_t(30, &[1, 4, 2, 4, 5], -1.0, 1.0);
        let mut err: f64 = 0.0;
        {
            let gl = gl.clone();
            err = err.max(grad_check(
                &pin(31, |t: &mut Tape<f64>, gu: &Fval| coupler.borrow().couple(t, gu, &gl)),
                &gu,
                EPS,
            )?);
        }
        {
            let gu = gu.clone();
            err = err.max(grad_check(
                &pin(32, |t: &mut Tape<f64>, gl: &Fval| coupler.borrow().couple(t, &gu, gl)),
                &gl,
                EPS,
            )?);
        }
        {
            let w0 = coupler.borrow().f1.weight.clone();
            let (gu, gl) = (gu.clone(), gl.clone());
            err = err.max(grad_check(
                &pin(33, move |t: &mut Tape<f64>, w: &Fval| {
                    coupler.borrow_mut().f1.weight = w.clone();
                    coupler.borrow().couple(t, &gu, &gl)
                }),
                &w0,
                EPS,
            )?);
        }
        out.push(entry("couple", err));
    }

    // topk_regress through the selection.
    {
        let agg = rand_t(34, &[1, 1, 6, 2, 3], -2.0, 2.0);
        let err = grad_check(
            &pin(35, |t: &mut Tape<f64>, v: &Fval| regression::topk_regress(t, v, 2)),
            &agg,
            EPS,
        )?;
        out.push(entry("topk_regress", err));
    }

    // superpixel_upsample against both arguments.
    {
        let d0 = rand_t(36, &[1, 2, 2], 0.0, 4.0);
        let logits = rand_t(37, &[1, 9, 8, 8], -1.0, 1.0);
        let mut err: f64 = 0.0;
        {
            let logits = logits.clone();
            err = err.max(grad_check(
                &pin(38, move |t: &mut Tape<f64>, d0: &Fval| {
                    let w = SuperpixelWeights::from_logits(t, &logits)?;
                    regression::superpixel_upsample(t, d0, &w)
                }),
                &d0,
                EPS,
            )?);
        }
        {
            let d0 = d0.clone();
            err = err.max(grad_check(
                &pin(39, move |t: &mut Tape<f64>, lg: &Fval| {
                    let w = SuperpixelWeights::from_logits(t, lg)?;
                    regression::superpixel_upsample(t, &d0, &w)
                }),
                &logits,
                EPS,
            )?);
        }
        out.push(entry("superpixel_upsample", err));
    }

    out.extend(model_entries()?);
    Ok(out)
}

/// Step size for the end-to-end entries. The composed network is piecewise
/// smooth: a 1e-4 half-step on one input moves thousands of pre-activations
/// and reliably straddles some leaky-relu kink, which corrupts the central
/// difference no matter how exact the analytic gradient is. 3e-6 sits below
/// the observed kink spacing while keeping fp64 cancellation noise near 1e-9.
const MODEL_EPS: f64 = 3e-6;

/// End-to-end checks through the assembled micro network and its loss.
/// The analytic gradient is exact and complete; finite differences probe a
/// fixed random subset of coordinates to stay inside the runtime budget.
fn model_entries() -> Result<Vec<GradEntry>> {
    let sc = SynthConfig::new(32, 64, 16)?;
    let s = &synth_generate::<f64>(sc, 97, 1)?[0];
    let one = |t: &Tensor<f64>| Tensor::stack(&[t]).expect("batch");
    let (left, right) = (one(&s.left), one(&s.right));
    let (gt, mask) = (one(&s.d_gt), one(&s.train_mask(16)));

    let model = RefCell::new(StereoModel::<f64>::seeded(41, ModelConfig::micro())?);
    let loss_of = move |t: &mut Tape<f64>,
                        m: &mut StereoModel<f64>,
                        l: &Tensor<f64>,
                        r: &Tensor<f64>,
                        gt: &Tensor<f64>,
                        mask: &Tensor<f64>|
          -> Result<Fval> {
        let out = m.forward(t, l, r, Mode::Train)?;
        let (loss, _) = total_loss(t, &out.quarter, &out.full, gt, mask, LossWeights::default())?;
        Ok(loss)
    };

    let mut entries = Vec::new();
    {
        let (right, gt, mask) = (right.clone(), gt.clone(), mask.clone());
        let model = &model;
        let f = move |t: &mut Tape<f64>, x: &Fval| {
            loss_of(t, &mut model.borrow_mut(), x, &right, &gt, &mask)
        };
        let err = grad_check_sampled(&f, &left, MODEL_EPS, 10, 4242)?;
        entries.push(entry("model (input)", err));
    }
    {
        let mut err: f64 = 0.0;
        for (target, probe_seed) in [
            ("agg.lower.head.weight", 4243u64),
            ("backbone.compress.conv.weight", 4244),
        ] {
            let mut w0 = None;
            model.borrow_mut().visit_params("", &mut |name, p| {
                if name == target {
                    w0 = Some(p.clone());
                }
            });
            let w0 = w0.ok_or_else(|| Error::config(format!("no parameter {target}")))?;
            let (left, right, gt, mask) =
                (left.clone(), right.clone(), gt.clone(), mask.clone());
            let model = &model;
            let f = move |t: &mut Tape<f64>, x: &Fval| {
                model.borrow_mut().visit_params("", &mut |name, p| {
                    if name == target {
                        *p = x.clone();
                    }
                });
                loss_of(t, &mut model.borrow_mut(), &left, &right, &gt, &mask)
            };
            err = err.max(grad_check_sampled(&f, &w0, MODEL_EPS, 8, probe_seed)?);
        }
        entries.push(entry("model (weights)", err));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.set("height", "32").unwrap();
        cfg.set("width", "64").unwrap();
        cfg.set("dmax", "16").unwrap();
        cfg.set("samples", "2").unwrap();
        cfg.set("steps", "2").unwrap();
        cfg.set("ckpt_every", "1000").unwrap();
        cfg
    }

    #[test]
    fn smoke_training_runs_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.set("out", dir.path().join("run").to_str().unwrap()).unwrap();
        let (_, outcome) = train(&cfg).unwrap();
        assert_eq!(outcome.steps, 2);
        assert!(outcome.final_loss.is_finite());
        assert!(outcome.report.epe.is_finite());
        let csv = std::fs::read_to_string(dir.path().join("run/loss.csv")).unwrap();
        assert!(csv.starts_with("step,loss,epe_px\n"));
        assert_eq!(csv.lines().count(), 3);
        assert!(dir.path().join("run/model.dvol").exists());
    }

    #[test]
    fn first_step_loss_is_reproducible() {
        let run = || {
            let cfg = tiny_cfg();
            let dataset = Dataset::synth(&cfg).unwrap();
            let mut model =
                StereoModel::seeded(cfg.seed, ModelConfig::from_run(&cfg).unwrap()).unwrap();
            let mut first = None;
            run_training(
                &cfg,
                &dataset,
                &mut model,
                |step, loss, _| {
                    if step == 0 {
                        first = Some(loss);
                    }
                },
                None,
            )
            .unwrap();
            first.unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn dataset_round_trips_through_a_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let data = Dataset::<f32>::synth(&cfg).unwrap();
        Dataset::save_dir(dir.path(), &data.samples).unwrap();
        let back = Dataset::<f32>::load_dir(dir.path()).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in data.samples.iter().zip(&back.samples) {
            // Images are 8-bit on disk; ground truth and masks are exact.
            assert!(a.left.max_abs_diff(&b.left) <= 0.5 / 255.0 + 1e-6);
            assert_eq!(a.d_gt.data(), b.d_gt.data());
            assert_eq!(a.valid.data(), b.valid.data());
        }
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = match Dataset::<f32>::load_dir(dir.path()) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected an error for an empty directory"),
        };
        assert!(err.contains("no *_left.png"), "{err}");
    }

    #[test]
    fn ablation_matrix_enumerates_twelve_variants() {
        let configs = ablation_configs(&RunConfig::default());
        assert_eq!(configs.len(), 12);
        for cfg in &configs {
            cfg.validate().unwrap();
        }
        assert_eq!(configs.iter().filter(|c| c.arch == Arch::Single).count(), 2);
        assert_eq!(
            configs
                .iter()
                .filter(|c| c.arch == Arch::Dual && c.coupling == [false; 3])
                .count(),
            1
        );
    }

    #[test]
    fn aggregate_matches_pixel_weighted_mean_of_rows() {
        let cfg = tiny_cfg();
        let dataset = Dataset::synth(&cfg).unwrap();
        let mut model =
            StereoModel::seeded(cfg.seed, ModelConfig::from_run(&cfg).unwrap()).unwrap();
        let (rows, agg) = evaluate(&mut model, &dataset, cfg.dmax).unwrap();
        let total: usize = rows.iter().map(|r| r.valid_pixels).sum();
        let weighted: f64 = rows
            .iter()
            .map(|r| r.epe * r.valid_pixels as f64 / total as f64)
            .sum();
        assert!((weighted - agg.epe).abs() < 1e-6);
        assert_eq!(agg.valid_pixels, total);
    }

    #[test]
    fn corrupted_gradient_rule_is_caught() {
        // Negative control: a deliberately wrong VJP must trip the checker.
        let f = |t: &mut Tape<f64>, x: &Fval| {
            let y = x.map(|v| v * v);
            if t.is_recording() {
                let xc = x.clone();
                t.record(&y, move |gy, store| {
                    // Claims d(x^2)/dx = x instead of 2x.
                    let wrong = Tensor::from_vec(
                        xc.shape(),
                        xc.data().iter().zip(gy.data()).map(|(&x, &g)| x * g).collect(),
                    )
                    .unwrap();
                    store.accumulate(xc.id(), wrong);
                });
            }
            Ok(ops::sum_all(t, &y))
        };
        let x = rand_t(50, &[4], 0.5, 2.0);
        let err = grad_check(&f, &x, EPS).unwrap();
        assert!(err > GRAD_TOL, "corrupted rule slipped through: {err}");
    }
}
