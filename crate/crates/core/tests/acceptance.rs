//! System acceptance gates. Each test prints one verdict line so a log
//! scrape shows the full scorecard; tolerances are pinned here, not in
//! helper code.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualvol::aggregation::Coupler;
use dualvol::config::RunConfig;
use dualvol::costvol::{build_volume, oracle, VolumeKind, CORR_CHANNELS};
use dualvol::data::png::read_disp_png16;
use dualvol::data::{pfm, synth_generate, SynthConfig};
use dualvol::harness::{ablate, ablation_csv, gradcheck_suite, train, GRAD_TOL};
use dualvol::metrics::{bad_sigma, d1_rate, epe};
use dualvol::regression::{superpixel_upsample, topk_regress, SuperpixelWeights};
use dualvol::{Tape, Tensor, Tensor32, Tensor64};

fn verdict(criterion: &str, ok: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} failed: {detail}");
}

fn rand_t(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let entries = gradcheck_suite().expect("gradient suite must run");
    let elapsed = start.elapsed().as_secs_f64();

    let required = [
        "conv2d",
        "conv3d",
        "conv3d_transposed",
        "batch_norm",
        "activations",
        "softmax_axis",
        "smooth_l1",
        "couple",
        "topk_regress",
        "superpixel_upsample",
    ];
    let covered = required
        .iter()
        .all(|r| entries.iter().any(|e| e.label == *r))
        && entries.iter().any(|e| e.label.starts_with("model"));
    let worst = entries.iter().fold(0.0f64, |m, e| m.max(e.err));
    let all_pass = entries.iter().all(|e| e.pass);
    for e in &entries {
        println!(
            "  gradcheck {:<22} {:>9.2e}  {}",
            e.label,
            e.err,
            if e.pass { "ok" } else { "FAIL" }
        );
    }
    verdict(
        "1 (gradient suite)",
        all_pass && covered && elapsed < 120.0,
        &format!(
            "{} entries, worst rel err {worst:.2e} (tol {GRAD_TOL:.0e}), {elapsed:.1}s (budget 120s)",
            entries.len()
        ),
    );
}

#[test]
fn criterion_2_volume_oracle_equivalence() {
    let (b, dq, h, w) = (1, 6, 8, 12);
    let ng = 4;
    let cases = [
        (VolumeKind::GwcDot, 8, ng),
        (VolumeKind::GwcSub, 8, ng),
        (VolumeKind::NormCorr, CORR_CHANNELS, 1),
        (VolumeKind::Concat, CORR_CHANNELS, 2 * CORR_CHANNELS),
    ];
    let mut worst = 0.0f64;
    let mut shapes_ok = true;
    for seed in 0..10u64 {
        for &(kind, c, cv) in &cases {
            let fl = rand_t(1000 + seed * 8, &[b, c, h, w], -1.0, 1.0);
            let fr = rand_t(2000 + seed * 8 + kind as u64, &[b, c, h, w], -1.0, 1.0);
            let built = build_volume(&mut Tape::disabled(), kind, &fl, &fr, ng, dq)
                .expect("builder must accept oracle-sized features");
            let reference = oracle(kind, &fl, &fr, ng, dq).expect("oracle");
            shapes_ok &= built.shape() == [b, cv, dq, h, w]
                && reference.shape() == built.shape();
            worst = worst.max(built.max_abs_diff(&reference));
        }
    }
    verdict(
        "2 (cost-volume oracles)",
        shapes_ok && worst <= 1e-6,
        &format!("4 builders x 10 seeds, worst abs diff {worst:.2e} (tol 1e-6), shapes ok: {shapes_ok}"),
    );
}

#[test]
fn criterion_3_coupling_algebra() {
    let channels = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut coupler = Coupler::<f64>::new(&mut rng, channels);
    let gu = rand_t(12, &[1, channels, 3, 4, 5], -1.0, 1.0);
    let gl = rand_t(13, &[1, channels, 3, 4, 5], -1.0, 1.0);
    let kshape = [channels, channels, 1, 3, 3];

    // All-zero mixing leaves the lower branch untouched.
    coupler.f1.weight = Tensor::zeros(&kshape);
    coupler.f1.bias = Some(Tensor::zeros(&[channels]));
    coupler.f2.weight = Tensor::zeros(&kshape);
    coupler.f2.bias = Some(Tensor::zeros(&[channels]));
    let fused = coupler.couple(&mut Tape::disabled(), &gu, &gl).unwrap();
    let zero_exact = fused
        .data()
        .iter()
        .zip(gl.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    // Identity outer conv with a silent inner conv passes the sum through.
    coupler.f1.weight = Tensor::from_fn(&kshape, |i| {
        let kx = i % 3;
        let ky = (i / 3) % 3;
        let ci = (i / 9) % channels;
        let co = i / (9 * channels);
        if co == ci && ky == 1 && kx == 1 {
            1.0
        } else {
            0.0
        }
    });
    let fused = coupler.couple(&mut Tape::disabled(), &gu, &gl).unwrap();
    let sum_exact = fused
        .data()
        .iter()
        .zip(gu.data().iter().zip(gl.data()))
        .all(|(f, (u, l))| f.to_bits() == (u + l).to_bits());

    verdict(
        "3 (coupling algebra)",
        zero_exact && sum_exact,
        &format!("zero weights -> lower branch exact: {zero_exact}; identity outer + zero inner -> branch sum exact: {sum_exact}"),
    );
}

#[test]
fn criterion_4_regression_exactness() {
    let dmax = 48;
    let dq = dmax / 4;
    let (h, w) = (2, 3);

    // A dominant score at one disparity index must regress to that index.
    let mut worst_hot = 0.0f64;
    for hot in 0..dq {
        let vol: Tensor32 = Tensor::from_fn(&[1, 1, dq, h, w], |i| {
            if (i / (h * w)) % dq == hot {
                40.0
            } else {
                0.0
            }
        });
        let d0 = topk_regress(&mut Tape::disabled(), &vol, 2).unwrap();
        for &v in d0.data() {
            worst_hot = worst_hot.max((v as f64 - hot as f64).abs());
        }
    }

    // Exactly normalized weights reproduce a constant field times four.
    let c = 2.5f64;
    let d0 = Tensor::full(&[1, 2, 3], c);
    let logits = Tensor::from_fn(&[1, 9, 8, 12], |i| {
        if (i / (8 * 12)) % 9 == 4 {
            800.0
        } else {
            0.0
        }
    });
    let weights = SuperpixelWeights::from_logits(&mut Tape::disabled(), &logits).unwrap();
    let d1 = superpixel_upsample(&mut Tape::disabled(), &d0, &weights).unwrap();
    let four_x_exact = d1.data().iter().all(|v| v.to_bits() == (4.0 * c).to_bits());

    // Hostile inputs stay inside the representable disparity range.
    let mut bounded = true;
    for seed in 0..20u64 {
        let vol = rand_t(300 + seed, &[1, 1, dq, 4, 4], -50.0, 50.0);
        let lg = rand_t(400 + seed, &[1, 9, 16, 16], -10.0, 10.0);
        let d0 = topk_regress(&mut Tape::disabled(), &vol, 2).unwrap();
        let wts = SuperpixelWeights::from_logits(&mut Tape::disabled(), &lg).unwrap();
        let d1 = superpixel_upsample(&mut Tape::disabled(), &d0, &wts).unwrap();
        for &v in d0.data().iter().chain(d1.data()) {
            bounded &= (0.0..=(dmax - 1) as f64).contains(&v);
        }
    }

    verdict(
        "4 (regression exactness)",
        worst_hot <= 1e-5 && four_x_exact && bounded,
        &format!(
            "one-hot worst err {worst_hot:.2e} over all {dq} indices (tol 1e-5); constant-field 4x exact: {four_x_exact}; outputs within [0, {}]: {bounded}",
            dmax - 1
        ),
    );
}

#[test]
fn criterion_5_toy_overfit() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.set("out", dir.path().to_str().unwrap()).unwrap();
    assert_eq!(
        (cfg.dmax, cfg.ng, cfg.height, cfg.width, cfg.samples),
        (48, 4, 64, 128, 20),
        "overfit check must run the shipped toy preset"
    );
    assert!(cfg.steps <= 2000 && (cfg.lr - 1e-3).abs() < 1e-12);

    let start = Instant::now();
    let (_, outcome) = train(&cfg).expect("training must complete");
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "5 (toy overfit)",
        outcome.report.epe < 1.0 && outcome.final_loss < 0.2 && elapsed < 900.0,
        &format!(
            "{} steps -> train EPE {:.3} px (< 1.0), final loss {:.4} (< 0.2), {:.0}s (budget 900s)",
            outcome.steps, outcome.report.epe, outcome.final_loss, elapsed
        ),
    );
}

#[test]
fn criterion_6_ablation_matrix() {
    let mut cfg = RunConfig::default();
    cfg.set("height", "32").unwrap();
    cfg.set("width", "64").unwrap();
    cfg.set("dmax", "16").unwrap();
    cfg.set("samples", "2").unwrap();
    cfg.set("steps", "50").unwrap();

    let rows = ablate(&cfg).expect("ablation must complete");
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    let expected = [
        "single/gwc-dot",
        "single/norm-corr",
        "dual/gwc-dot+norm-corr/000",
        "dual/gwc-dot+gwc-sub/111",
        "dual/gwc-dot+norm-corr/111",
        "dual/gwc-dot+concat/111",
        "dual/gwc-sub+norm-corr/111",
        "dual/gwc-sub+concat/111",
        "dual/norm-corr+concat/111",
        "dual/gwc-dot+norm-corr/100",
        "dual/gwc-dot+norm-corr/110",
        "dual/gwc-dot+norm-corr/111",
    ];
    let labels_ok = labels == expected;
    let finite = rows
        .iter()
        .all(|r| r.final_loss.is_finite() && r.epe.is_finite() && r.d1.is_finite());
    let csv = ablation_csv(&rows);
    let header_ok = csv.lines().next()
        == Some("architecture,coupling,upper,lower,loss,epe_px,d1_pct,bad1_pct,bad2_pct,bad3_pct,time_s");

    verdict(
        "6 (ablation matrix)",
        rows.len() == 12 && labels_ok && finite && header_ok,
        &format!(
            "{} rows (want 12), labels ok: {labels_ok}, all losses finite after 50 steps: {finite}, csv columns ok: {header_ok}",
            rows.len()
        ),
    );
}

#[test]
fn criterion_7_metric_correctness() {
    let sigmas = [1.0, 2.0, 3.0];
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let (h, w) = (rng.gen_range(2..6), rng.gen_range(2..7));
        let d: Tensor64 = Tensor::from_fn(&[1, h, w], |_| rng.gen_range(0.0..60.0));
        let gt: Tensor64 = Tensor::from_fn(&[1, h, w], |_| rng.gen_range(0.1..60.0));
        let mut mask: Tensor64 =
            Tensor::from_fn(&[1, h, w], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        mask = mask.with_element(0, 1.0);

        // Direct per-pixel tally, written apart from the metrics module.
        let (mut n, mut abs_sum, mut d1_bad) = (0usize, 0.0f64, 0usize);
        let mut sig_bad = [0usize; 3];
        for i in 0..h * w {
            if mask.data()[i] == 0.0 {
                continue;
            }
            n += 1;
            let err = (d.data()[i] - gt.data()[i]).abs();
            abs_sum += err;
            if err > f64::max(3.0, 0.05 * gt.data()[i]) {
                d1_bad += 1;
            }
            for (k, s) in sigmas.iter().enumerate() {
                if err > *s {
                    sig_bad[k] += 1;
                }
            }
        }
        worst = worst.max((epe(&d, &gt, &mask).unwrap() - abs_sum / n as f64).abs());
        worst = worst
            .max((d1_rate(&d, &gt, &mask).unwrap() - 100.0 * d1_bad as f64 / n as f64).abs());
        for (k, s) in sigmas.iter().enumerate() {
            worst = worst.max(
                (bad_sigma(&d, &gt, &mask, *s).unwrap() - 100.0 * sig_bad[k] as f64 / n as f64)
                    .abs(),
            );
        }
    }

    // Boundary behaviour of the relative threshold: a 4 px miss is an
    // outlier against gt 10 (threshold 3) but not against gt 100
    // (threshold 5).
    let ones = Tensor64::full(&[1, 1, 1], 1.0);
    let near = d1_rate(
        &Tensor::full(&[1, 1, 1], 14.0),
        &Tensor::full(&[1, 1, 1], 10.0),
        &ones,
    )
    .unwrap();
    let far = d1_rate(
        &Tensor::full(&[1, 1, 1], 104.0),
        &Tensor::full(&[1, 1, 1], 100.0),
        &ones,
    )
    .unwrap();
    let boundary_ok = near == 100.0 && far == 0.0;

    verdict(
        "7 (metric correctness)",
        worst <= 1e-9 && boundary_ok,
        &format!("100 sparse fixtures, worst deviation {worst:.2e} (tol 1e-9); 4 px boundary: gt 10 outlier / gt 100 inlier: {boundary_ok}"),
    );
}

#[test]
fn criterion_8_io_and_synthesis() {
    let dir = tempfile::tempdir().unwrap();

    // PFM round trip preserves every bit.
    let field: Tensor32 = Tensor::from_fn(&[5, 7], |i| {
        ((i as f32) - 17.0) * 0.37 + if i % 3 == 0 { 1e-6 } else { 0.0 }
    });
    let path = dir.path().join("rt.pfm");
    pfm::write_pfm(&path, &field).unwrap();
    let (back, pfm_scale) = pfm::read_pfm::<f32>(&path).unwrap();
    let pfm_ok = pfm_scale == 1.0
        && back.shape() == field.shape()
        && back
            .data()
            .iter()
            .zip(field.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());

    // 16-bit PNG decode: raw/256 with zero marking missing pixels.
    let png_path = dir.path().join("disp.png");
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(3, 2);
    img.put_pixel(0, 0, image::Luma([25600u16]));
    img.put_pixel(1, 0, image::Luma([0u16]));
    img.put_pixel(2, 0, image::Luma([256u16]));
    img.save(&png_path).unwrap();
    let (disp, valid) = read_disp_png16::<f32>(&png_path).unwrap();
    let png_ok = disp.data()[0] == 100.0
        && valid.data()[1] == 0.0
        && valid.data()[0] == 1.0
        && disp.data()[2] == 1.0;

    // Synthetic pairs must be photo-consistent under their own disparity.
    let cfg = SynthConfig::new(64, 128, 48).unwrap();
    let samples = synth_generate::<f32>(cfg, 424242, 3).unwrap();
    let mut consistent = 0usize;
    let mut valid_total = 0usize;
    for s in &samples {
        let (h, w) = (64usize, 128usize);
        for y in 0..h {
            for x in 0..w {
                if s.valid.data()[y * w + x] == 0.0 {
                    continue;
                }
                valid_total += 1;
                let xs = x as f64 - s.d_gt.data()[y * w + x] as f64;
                let x0 = (xs.floor() as isize).clamp(0, w as isize - 1) as usize;
                let x1 = (x0 + 1).min(w - 1);
                let frac = (xs - x0 as f64).clamp(0.0, 1.0);
                let mut worst_c = 0.0f64;
                for ch in 0..3 {
                    let r0 = s.right.data()[(ch * h + y) * w + x0] as f64;
                    let r1 = s.right.data()[(ch * h + y) * w + x1] as f64;
                    let warped = r0 * (1.0 - frac) + r1 * frac;
                    let l = s.left.data()[(ch * h + y) * w + x] as f64;
                    worst_c = worst_c.max((l - warped).abs());
                }
                if worst_c <= 1e-3 {
                    consistent += 1;
                }
            }
        }
    }
    let frac = consistent as f64 / valid_total as f64;
    let warp_ok = frac >= 0.99;

    verdict(
        "8 (io and synthesis)",
        pfm_ok && png_ok && warp_ok,
        &format!("pfm bit-exact: {pfm_ok}; png16 25600 -> 100.0 px and 0 -> invalid: {png_ok}; warp-consistent valid pixels {:.2}% (need 99%)", frac * 100.0),
    );
}
