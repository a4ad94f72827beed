//! Black-box tests of the compiled binary: artifact layout, exit codes,
//! and checkpoint round trips through the CLI surface.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qartsr"))
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let out = dir.join("out");
    let cfg = format!(
        r#"{{
  "seed": 7,
  "net": {{ "base_channels": 4, "blocks": 2, "lr_size": 8 }},
  "data": {{ "count": 3, "hr_size": 32, "noise": 0.02 }},
  "backbone": {{ "steps": 8, "batch": 2, "lr": 2e-3, "timestep": 1 }},
  "calib": {{ "w_bits": 4, "a_bits": 4, "stage_steps": 3, "et_steps": 3, "batch": 2, "lr": 1e-3 }},
  "sweep_timesteps": [1, 1000],
  "out_dir": {:?}
}}"#,
        out.to_str().unwrap()
    );
    let path = dir.join("run.json");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn full_command_flow_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");

    run_ok(&["gen-data", "-c", cfg]);
    assert!(out.join("config_echo.json").is_file());
    assert!(out.join("data/manifest.json").is_file());
    assert!(out.join("data/hr_0000.ppm").is_file());
    assert!(out.join("data/lr_0002.ppm").is_file());

    let text = std::str::from_utf8(&run_ok(&["train-backbone", "-c", cfg]).stdout)
        .unwrap()
        .to_string();
    assert!(
        text.contains("trained at t=1"),
        "unexpected stdout: {}",
        text
    );
    let backbone = out.join("backbone_t1.qart");
    assert!(backbone.is_file());
    assert!(out.join("backbone_t1_train.csv").is_file());
    let bb = backbone.to_str().unwrap();

    let sweep = run_ok(&["sweep-timestep", "-c", cfg, "--checkpoint", bb]);
    let sweep_text = String::from_utf8_lossy(&sweep.stdout).to_string();
    assert!(
        sweep_text.contains("best timestep: 1"),
        "sweep stdout: {}",
        sweep_text
    );
    let profile = std::fs::read_to_string(out.join("timestep_profile.csv")).unwrap();
    assert!(
        profile.starts_with("t,lambda,latent_error"),
        "profile csv: {}",
        profile
    );
    assert_eq!(
        profile.lines().count(),
        3,
        "header + one row per swept timestep"
    );

    // Flag overrides replace the configured sweep; amplification grows
    // with the timestep.
    run_ok(&[
        "sweep-timestep",
        "-c",
        cfg,
        "--checkpoint",
        bb,
        "--bits",
        "4,4",
        "--t-list",
        "1,500,1000",
    ]);
    let profile = std::fs::read_to_string(out.join("timestep_profile.csv")).unwrap();
    let lambdas: Vec<f64> = profile
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(lambdas.len(), 3, "one row per listed timestep: {}", profile);
    assert!(
        lambdas.windows(2).all(|w| w[0] < w[1]),
        "lambda must increase with t: {:?}",
        lambdas
    );

    run_ok(&[
        "quantize",
        "-c",
        cfg,
        "--checkpoint",
        bb,
        "--method",
        "maxmin",
        "--bits",
        "4,4",
    ]);
    let maxmin = out.join("quantized_maxmin_w4a4.qart");
    assert!(maxmin.is_file());

    run_ok(&["calibrate", "-c", cfg, "--checkpoint", bb]);
    let calibrated = out.join("quantized_calibrated_w4a4.qart");
    assert!(calibrated.is_file());
    let stages = std::fs::read_to_string(out.join("calibration_stages.csv")).unwrap();
    // Two denoiser blocks + two decoder convs, reversed, then the
    // extended end-to-end phase.
    for name in ["dec2", "dec1", "block1", "block0", "e2e_extended"] {
        assert!(
            stages.contains(name),
            "stage csv missing {}: {}",
            name,
            stages
        );
    }

    let eval = run_ok(&[
        "eval",
        "-c",
        cfg,
        "--checkpoint",
        calibrated.to_str().unwrap(),
    ]);
    let eval_text = String::from_utf8_lossy(&eval.stdout).to_string();
    assert!(eval_text.contains("tag,w_bits,a_bits,psnr_db,ssim,latent_error"));
    assert!(out.join("eval_quantized_calibrated_w4a4.csv").is_file());

    let report = run_ok(&[
        "report",
        "-c",
        cfg,
        "--checkpoint",
        calibrated.to_str().unwrap(),
    ]);
    let report_text = String::from_utf8_lossy(&report.stdout).to_string();
    assert!(
        report_text.contains("quantized at W4A4 for t=1"),
        "report: {}",
        report_text
    );
    assert!(report_text.contains("smaller"), "report: {}", report_text);
    let cost = std::fs::read_to_string(out.join("cost_report.csv")).unwrap();
    assert!(cost.starts_with("layer,fp_params,effective_params,fp_macs,effective_macs"));
    assert!(cost.lines().last().unwrap().starts_with("total,"));

    // Report also gathers the evaluation rows written so far.
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("source,tag,w_bits,a_bits,psnr_db,ssim,latent_error"));
    assert!(
        summary.contains("eval,quantized_calibrated_w4a4,4,4,"),
        "summary: {}",
        summary
    );
}

#[test]
fn eval_is_reproducible_through_checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");

    run_ok(&["train-backbone", "-c", cfg]);
    let bb = out.join("backbone_t1.qart");
    let bb = bb.to_str().unwrap();
    run_ok(&[
        "quantize",
        "-c",
        cfg,
        "--checkpoint",
        bb,
        "--method",
        "maxmin",
    ]);
    let ckpt = out.join("quantized_maxmin_w4a4.qart");

    let first = run_ok(&["eval", "-c", cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    let second = run_ok(&["eval", "-c", cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(
        first.stdout, second.stdout,
        "evaluating the same checkpoint twice must agree"
    );
}

#[test]
fn usage_errors_exit_with_code_two() {
    let none = bin().output().unwrap();
    assert_eq!(none.status.code(), Some(2));

    let unknown = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));

    let bad_flag = bin().args(["gen-data", "--bogus"]).output().unwrap();
    assert_eq!(bad_flag.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_code_one_and_a_reason() {
    let dir = tempfile::tempdir().unwrap();

    // Missing config file.
    let missing = bin()
        .args(["gen-data", "-c", "/definitely/not/here.json"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&missing.stderr).to_string();
    assert!(stderr.starts_with("error:"), "stderr: {}", stderr);

    // Config that fails validation.
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{ "calib": { "w_bits": 1 } }"#).unwrap();
    let invalid = bin()
        .args(["gen-data", "-c", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(invalid.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&invalid.stderr).contains("error:"));

    // Unknown config keys are rejected, not ignored.
    let typo = dir.path().join("typo.json");
    std::fs::write(&typo, r#"{ "sede": 3 }"#).unwrap();
    let unknown = bin()
        .args(["gen-data", "-c", typo.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(unknown.status.code(), Some(1));

    // Corrupt checkpoint.
    let junk = dir.path().join("junk.qart");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let cfg = write_tiny_config(dir.path());
    let corrupt = bin()
        .args([
            "eval",
            "-c",
            cfg.to_str().unwrap(),
            "--checkpoint",
            junk.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(corrupt.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&corrupt.stderr).contains("error:"));
}

#[test]
fn out_dir_environment_override_wins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let forced = dir.path().join("forced");

    let out = bin()
        .args(["gen-data", "-c", cfg.to_str().unwrap()])
        .env("QART_OUT", &forced)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(forced.join("data/manifest.json").is_file());
    assert!(
        !dir.path().join("out").exists(),
        "configured dir must be ignored under override"
    );
}
