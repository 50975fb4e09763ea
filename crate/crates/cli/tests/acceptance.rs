//! Criterion 11: the full default-config chain
//! synth-data -> pretrain -> probe -> attention -> plot must complete with
//! exit 0 and produce every declared artifact, and resuming from a mid-run
//! checkpoint must reproduce the uninterrupted run's final parameters.

use detco_core::checkpoint::Checkpoint;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

fn detco() -> Command {
    Command::new(env!("CARGO_BIN_EXE_detco"))
}

fn run_ok(cmd: &mut Command, what: &str) {
    let output = cmd.output().expect("spawn detco");
    assert!(
        output.status.success(),
        "{what} failed (status {:?}):\nstdout: {}\nstderr: {}",
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn single_run_dir(root: &Path) -> PathBuf {
    let mut dirs: Vec<_> = std::fs::read_dir(root)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 1, "expected exactly one run dir under {root:?}");
    dirs.pop().unwrap()
}

#[test]
fn criterion_11_end_to_end_smoke_and_resume() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("toydata");
    let exp_dir = tmp.path().join("experiments");
    let resume_dir = tmp.path().join("resumed");
    let plots_dir = tmp.path().join("plots");
    let attn_png = tmp.path().join("attention.png");

    // synth-data on defaults
    run_ok(
        detco().args(["synth-data", "--out", data_dir.to_str().unwrap()]),
        "synth-data",
    );
    assert!(data_dir.join("class0").exists());
    assert!(data_dir.join("class7").exists());

    // pretrain on defaults (300 steps, desk config)
    run_ok(
        detco().args([
            "pretrain",
            "--data",
            data_dir.to_str().unwrap(),
            "--out",
            exp_dir.to_str().unwrap(),
        ]),
        "pretrain",
    );
    let run_dir = single_run_dir(&exp_dir);
    let final_ckpt = run_dir.join("final.detco");
    let metrics = run_dir.join("metrics.jsonl");
    assert!(final_ckpt.exists(), "final checkpoint must exist");
    assert!(metrics.exists(), "metrics log must exist");
    assert!(
        run_dir.join("effective-config.conf").exists(),
        "effective config must be materialized"
    );
    let metrics_text = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(
        metrics_text.lines().count(),
        300,
        "one metrics line per step"
    );
    let mid_ckpt = run_dir.join("checkpoints/step_000200.detco");
    assert!(mid_ckpt.exists(), "periodic checkpoint must exist");

    // probe the final checkpoint on all four stages
    run_ok(
        detco().args([
            "probe",
            "--checkpoint",
            final_ckpt.to_str().unwrap(),
            "--data",
            data_dir.to_str().unwrap(),
            "--stages",
            "2,3,4,5",
        ]),
        "probe",
    );
    assert!(run_dir.join("probe_report.json").exists());
    assert!(run_dir.join("probe_report.txt").exists());

    // attention overlay for one toy image
    let image = std::fs::read_dir(data_dir.join("class0"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    run_ok(
        detco().args([
            "attention",
            "--checkpoint",
            final_ckpt.to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--out",
            attn_png.to_str().unwrap(),
        ]),
        "attention",
    );
    assert!(attn_png.exists());

    // plot the metrics log
    run_ok(
        detco().args([
            "plot",
            "--log",
            metrics.to_str().unwrap(),
            "--out",
            plots_dir.to_str().unwrap(),
        ]),
        "plot",
    );
    for name in ["total.png", "total.csv", "l_gg.png", "l_ll.csv", "l_gl.png", "lr.csv"] {
        assert!(plots_dir.join(name).exists(), "missing plot artifact {name}");
    }

    // resume from the step-200 checkpoint and compare final parameters
    run_ok(
        detco().args([
            "pretrain",
            "--data",
            data_dir.to_str().unwrap(),
            "--out",
            resume_dir.to_str().unwrap(),
            "--resume",
            mid_ckpt.to_str().unwrap(),
        ]),
        "pretrain --resume",
    );
    let resumed_run = single_run_dir(&resume_dir);
    let resumed_ckpt = Checkpoint::load(&resumed_run.join("final.detco")).unwrap();
    let straight_ckpt = Checkpoint::load(&final_ckpt).unwrap();
    let diff = straight_ckpt
        .query_params
        .max_abs_diff(&resumed_ckpt.query_params)
        .unwrap();
    assert!(
        diff <= 1e-6,
        "resumed run diverged from the straight run by {diff}"
    );

    let elapsed = start.elapsed().as_secs_f64();
    let pass = elapsed < 600.0;
    println!(
        "ACCEPTANCE 11 end-to-end-smoke: {} (chain + resume in {elapsed:.0}s, resume diff {diff:.2e})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "chain exceeded the ten-minute budget: {elapsed:.0}s");
}

#[test]
fn usage_errors_exit_two_and_io_errors_exit_one() {
    let status = detco().status().expect("spawn");
    assert_eq!(status.code(), Some(2), "no args must exit 2");
    let status = detco()
        .args(["pretrain", "--config", "missing.file", "--out", "x"])
        .status()
        .expect("spawn");
    assert_eq!(status.code(), Some(1), "missing config must exit 1");
}
