//! End-to-end tests of the `dualvol` binary. Each test shells out to the
//! compiled executable so argument parsing, exit codes, and stdout/stderr
//! framing are exercised exactly as a user sees them.

use std::path::Path;
use std::process::{Command, Output};

use dualvol::data::pfm::read_pfm;

fn dualvol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualvol"))
        .args(args)
        .output()
        .expect("failed to spawn dualvol")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}, stderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr_of_failure(out: &Output) -> String {
    assert!(
        !out.status.success(),
        "expected failure, got exit 0 with stdout:\n{}",
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stderr.clone()).unwrap()
}

/// Shared tiny geometry: every knob that keeps a run in the sub-second range.
const TINY: &[&str] = &[
    "--height", "32", "--width", "64", "--dmax", "16", "--samples", "2", "--seed", "7",
];

fn gen_data(dir: &Path) {
    let out = dualvol(
        &[&["gen-data", "--out", dir.to_str().unwrap()], TINY].concat(),
    );
    stdout(&out);
}

fn train_tiny(data: &Path, out_dir: &Path, steps: &str) {
    let out = dualvol(
        &[
            &[
                "train",
                "--data-dir",
                data.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
                "--steps",
                steps,
                "--batch",
                "1",
            ],
            TINY,
        ]
        .concat(),
    );
    stdout(&out);
}

#[test]
fn gen_data_writes_a_complete_dataset() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path());
    for i in 0..2 {
        for suffix in ["left.png", "right.png", "gt.pfm", "valid.png"] {
            let path = dir.path().join(format!("{i:04}_{suffix}"));
            assert!(path.is_file(), "missing {}", path.display());
        }
    }
}

#[test]
fn training_is_deterministic_across_processes() {
    let data = tempfile::tempdir().unwrap();
    gen_data(data.path());
    let run_a = tempfile::tempdir().unwrap();
    let run_b = tempfile::tempdir().unwrap();
    train_tiny(data.path(), run_a.path(), "3");
    train_tiny(data.path(), run_b.path(), "3");

    let loss_a = std::fs::read(run_a.path().join("loss.csv")).unwrap();
    let loss_b = std::fs::read(run_b.path().join("loss.csv")).unwrap();
    assert_eq!(loss_a, loss_b, "same seed and data must give identical logs");

    let model_a = std::fs::read(run_a.path().join("model.dvol")).unwrap();
    let model_b = std::fs::read(run_b.path().join("model.dvol")).unwrap();
    assert_eq!(model_a, model_b, "trained weights must be bit-identical");
}

#[test]
fn eval_aggregate_is_the_pixel_weighted_mean() {
    let data = tempfile::tempdir().unwrap();
    gen_data(data.path());
    let run = tempfile::tempdir().unwrap();
    train_tiny(data.path(), run.path(), "2");

    let ckpt = run.path().join("model.dvol");
    let out = dualvol(
        &[
            &[
                "eval",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--data-dir",
                data.path().to_str().unwrap(),
                "--out",
                run.path().to_str().unwrap(),
            ],
            TINY,
        ]
        .concat(),
    );
    let csv = stdout(&out);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "sample,epe_px,d1_pct,bad1_pct,bad2_pct,bad3_pct,valid_pixels"
    );

    // Recompute the aggregate EPE from the per-sample rows; the CSV's own
    // aggregate row must match to printing precision.
    let mut weighted = 0.0;
    let mut pixels = 0.0;
    let mut aggregate = None;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 7, "bad row: {line}");
        let epe: f64 = cells[1].parse().unwrap();
        if cells[0] == "aggregate" {
            aggregate = Some(epe);
        } else {
            let n: f64 = cells[6].parse().unwrap();
            weighted += epe * n;
            pixels += n;
        }
    }
    let aggregate = aggregate.expect("aggregate row missing");
    assert!(
        (aggregate - weighted / pixels).abs() < 1e-9,
        "aggregate {aggregate} vs weighted mean {}",
        weighted / pixels
    );
}

#[test]
fn infer_writes_disparity_and_reports_epe() {
    let data = tempfile::tempdir().unwrap();
    gen_data(data.path());
    let run = tempfile::tempdir().unwrap();
    train_tiny(data.path(), run.path(), "2");

    let out_dir = tempfile::tempdir().unwrap();
    let out = dualvol(&[
        "infer",
        "--checkpoint",
        run.path().join("model.dvol").to_str().unwrap(),
        "--left",
        data.path().join("0000_left.png").to_str().unwrap(),
        "--right",
        data.path().join("0000_right.png").to_str().unwrap(),
        "--gt",
        data.path().join("0000_gt.pfm").to_str().unwrap(),
        "--out",
        out_dir.path().to_str().unwrap(),
        "--dmax",
        "16",
        "--seed",
        "7",
    ]);
    let text = stdout(&out);
    let epe: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("epe_px,"))
        .expect("epe_px line missing")
        .parse()
        .unwrap();
    assert!(epe.is_finite() && epe >= 0.0, "epe {epe}");

    assert!(out_dir.path().join("disparity.png").is_file());
    let (disp, _scale) = read_pfm::<f64>(&out_dir.path().join("disparity.pfm")).unwrap();
    assert_eq!(disp.shape(), &[32, 64]);
    assert!(
        disp.data().iter().all(|&d| (0.0..=15.0).contains(&d)),
        "disparities must stay inside the search range"
    );
}

#[test]
fn infer_rejects_images_with_unsupported_extents() {
    let data = tempfile::tempdir().unwrap();
    gen_data(data.path());
    let run = tempfile::tempdir().unwrap();
    train_tiny(data.path(), run.path(), "1");

    // A 20x20 gray PNG: not a multiple of the downsampling factor.
    let odd = data.path().join("odd.png");
    image::GrayImage::from_pixel(20, 20, image::Luma([128u8]))
        .save(&odd)
        .unwrap();

    let out = dualvol(&[
        "infer",
        "--checkpoint",
        run.path().join("model.dvol").to_str().unwrap(),
        "--left",
        odd.to_str().unwrap(),
        "--right",
        odd.to_str().unwrap(),
        "--out",
        data.path().join("out").to_str().unwrap(),
        "--dmax",
        "16",
    ]);
    let err = stderr_of_failure(&out);
    assert!(err.contains("32"), "error should name the extent rule: {err}");
}

#[test]
fn missing_checkpoint_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("nope.dvol");
    let out = dualvol(
        &[
            &[
                "eval",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--out",
                dir.path().to_str().unwrap(),
            ],
            TINY,
        ]
        .concat(),
    );
    let err = stderr_of_failure(&out);
    assert!(
        err.contains("nope.dvol"),
        "error should name the missing file: {err}"
    );
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "dmaxx = 16\n").unwrap();
    let out = dualvol(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let err = stderr_of_failure(&out);
    assert!(err.contains("dmaxx"), "error should echo the bad key: {err}");
}

#[test]
fn flags_override_config_file_values() {
    let data = tempfile::tempdir().unwrap();
    gen_data(data.path());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "height = 32\nwidth = 64\ndmax = 16\nsamples = 2\nseed = 7\nsteps = 9\nbatch = 1\n",
    )
    .unwrap();
    let out = dualvol(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data-dir",
        data.path().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--steps",
        "1",
    ]);
    stdout(&out);

    let loss = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    // Header plus exactly one step: the flag, not the file, decides.
    assert_eq!(loss.lines().count(), 2, "loss.csv:\n{loss}");
}

#[test]
fn gradcheck_reports_every_rule_and_passes() {
    let out = dualvol(&["gradcheck"]);
    let table = stdout(&out);
    assert_eq!(table.lines().next().unwrap(), "entry,max_rel_err,status");
    for entry in ["conv2d", "couple", "topk_regress", "superpixel_upsample"] {
        assert!(
            table.lines().any(|l| l.starts_with(&format!("{entry},"))),
            "missing entry {entry} in:\n{table}"
        );
    }
    assert!(
        table.lines().skip(1).all(|l| l.ends_with(",pass")),
        "all rules must pass:\n{table}"
    );
}
