//! Exit codes, config layering and run-root resolution of the binary.

use std::path::Path;
use std::process::{Command, Output};

fn pairseq(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pairseq"))
        .args(["--log", "error"])
        .args(args)
        .current_dir(cwd)
        .env_remove("PAIRSEQ_RUN_ROOT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(pairseq(&["no-such-command"], tmp.path()).status.code(), Some(2));
    let missing = pairseq(
        &["preprocess", "--atlas", "nope.txt", "--raw", "raw", "--out", "out"],
        tmp.path(),
    );
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn print_config_layers_file_and_flags_over_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.json"), r#"{"model": {"n_layers": 1}, "epochs": 7}"#).unwrap();
    let o = pairseq(
        &["pretrain", "--data", "d", "--config", "c.json", "--lr", "0.01", "--print-config"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(cfg["model"]["n_layers"], 1);
    assert_eq!(cfg["model"]["n_heads"], 2);
    assert_eq!(cfg["epochs"], 7);
    assert_eq!(cfg["lr"], 0.01);
}

#[test]
fn invalid_alphas_are_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.json"), r#"{"alpha1": 0.5, "alpha2": 0.6}"#).unwrap();
    let o = pairseq(&["pretrain", "--data", "d", "--config", "c.json", "--print-config"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn grad_check_reports_and_fails_at_zero_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = pairseq(&["grad-check"], tmp.path());
    assert!(ok.status.success());
    let report = stdout(&ok);
    assert!(report.starts_with("check,tensors,coordinates,kinks_skipped,max_rel_error,passed"));
    assert_eq!(pairseq(&["grad-check", "--tolerance", "0"], tmp.path()).status.code(), Some(4));
}

#[test]
fn runs_land_under_the_env_run_root() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let gen = pairseq(&["synth-gen", "--out", "syn", "--subjects", "2", "--voxels", "9", "--seed", "2"], dir);
    assert!(gen.status.success());
    std::fs::write(
        dir.join("tiny.json"),
        r#"{"epochs": 1, "n_train_cap": 32, "n_val_cap": 16,
            "model": {"d_model": 12, "n_layers": 1, "forward_expansion": 2, "mbm_hidden": 8}}"#,
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pairseq"))
        .args(["--log", "error", "pretrain", "--data", "syn/data", "--config", "tiny.json", "--fold", "2"])
        .current_dir(dir)
        .env("PAIRSEQ_RUN_ROOT", "elsewhere")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.join("runs").exists());
    let found: Vec<_> = walk(&dir.join("elsewhere"));
    assert!(found.iter().any(|p| p.ends_with("best.ckpt")), "{found:?}");
    assert!(found.iter().any(|p| p.ends_with("manifest.json")), "{found:?}");
}

fn walk(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap().flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p.to_string_lossy().into_owned());
        }
    }
    out
}
