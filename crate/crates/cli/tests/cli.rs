use std::path::Path;
use std::process::{Command, Output};

fn devgest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_devgest"))
        .args(args)
        .env_remove("DEVGEST_SEED")
        .output()
        .expect("binary runs")
}

fn devgest_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_devgest"));
    c.args(args);
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// Exactly one structured line on stderr with the given code.
fn assert_failure(o: &Output, expected: i32, kind: &str) {
    assert_eq!(code(o), expected, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error code={expected} kind={kind} message=\"")), "{err}");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_version_succeed() {
    for args in [&["--help"][..], &["--version"], &["train", "--help"]] {
        let o = devgest(args);
        assert_eq!(code(&o), 0);
        assert!(!o.stdout.is_empty());
    }
}

#[test]
fn unknown_flag_is_a_usage_error_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = devgest(&["train", "--stage", "1", "--data", p(dir.path()), "--out", p(&out), "--bogus"]);
    assert_failure(&o, 2, "usage");
    assert!(!out.exists());
    assert_failure(&devgest(&["train", "--stage", "3"]), 2, "usage");
    assert_failure(&devgest(&["no-such-command"]), 2, "usage");
}

#[test]
fn unknown_keys_are_config_errors_from_every_layer() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let base = ["train", "--stage", "1", "--data", p(dir.path()), "--out", p(&out)];

    let mut args = base.to_vec();
    args.extend(["--set", "stage1.nope=1"]);
    assert_failure(&devgest(&args), 3, "config");

    assert_failure(&devgest_env(&base, &[("DEVGEST_STAGE1__NOPE", "1")]), 3, "config");

    let toml = dir.path().join("bad.toml");
    std::fs::write(&toml, "[stage1]\nlr = -1.0\n").unwrap();
    let mut args = base.to_vec();
    args.extend(["--config", p(&toml)]);
    assert_failure(&devgest(&args), 3, "config");
    assert!(!out.exists());
}

#[test]
fn missing_inputs_exit_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let absent = dir.path().join("absent");
    let out = dir.path().join("out");
    let mut args = vec!["train", "--stage", "1", "--data", p(dir.path()), "--out", p(&out)];
    args.extend(["--config", p(&absent)]);
    assert_failure(&devgest(&args), 4, "missing_file");
    assert_failure(&devgest(&["train", "--stage", "1", "--data", p(&absent), "--out", p(&out)]), 4, "missing_file");
    let o = devgest(&[
        "generate",
        "--audio",
        p(&absent),
        "--image",
        p(&absent),
        "--stage1-ckpt",
        p(&absent),
        "--stage2-ckpt",
        p(&absent),
        "--out",
        p(&out),
    ]);
    assert_failure(&o, 4, "missing_file");
    assert!(!out.exists());
}

#[test]
fn synthetic_data_trains_and_evaluates_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    let o = devgest(&["synth-data", "--out", p(&data), "--clips", "2", "--seconds", "1", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("manifest.json").is_file());

    let o = devgest(&[
        "train", "--stage", "1", "--data", p(&data), "--out", p(&out), "--steps", "2", "--set", "stage1.batch=2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["stage1.ckpt", "stage1_loss.csv", "stage1_config.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.join("stage1_loss.csv")).unwrap();
    let steps: std::collections::BTreeSet<&str> = csv.lines().skip(1).filter_map(|l| l.split(',').next()).collect();
    assert_eq!(steps.into_iter().collect::<Vec<_>>(), ["1", "2"], "{csv}");

    // Real frames scored against themselves.
    let report_path = dir.path().join("report.json");
    let o = devgest(&["evaluate", "--real", p(&data), "--gen", p(&data), "--out", p(&report_path)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let full = &report["regions"]["full"];
    assert!((full["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-9, "{full}");
    assert!(full["lpips"].as_f64().unwrap().abs() < 1e-9, "{full}");
    assert!(report["set_metrics"]["fgd"].as_f64().unwrap().abs() < 1e-6);
}

#[test]
fn config_keys_lists_defaults() {
    let o = devgest(&["config-keys"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().any(|l| l == "stage1.steps = 2000"));
    assert!(text.lines().any(|l| l == "model.ablation.disable_deviation = false"));
}
