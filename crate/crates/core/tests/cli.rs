//! End-to-end checks of the `umcmc` binary: exit codes, CSV outputs, and the
//! partial flush on runtime failure.

use std::path::Path;
use std::process::{Command, Output};

const FAIR_COIN: &str = "0.5 0.5\n0.5 0.5\n1 0\n";

fn umcmc() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_umcmc"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn run_writes_all_four_csvs_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("out");
    write(
        &cfg,
        r#"
[target]
type = "gaussian"
dim = 1

[estimator]
k = 5
m = 40
R = 32

[cv]
approach = "empirical"

[run]
root_seed = 5
"#,
    );
    let output = umcmc()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", stderr_of(&output));
    for name in ["estimates.csv", "summary.csv", "cvfit.csv", "meeting_times.csv"] {
        let text = std::fs::read_to_string(out.join(name)).unwrap();
        assert!(text.lines().count() > 1, "{name} should have data rows");
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("coordinate,strategy,mean,variance,vr_factor"));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("meeting times:"), "stdout: {stdout}");
}

#[test]
fn seed_override_changes_the_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    write(
        &cfg,
        r#"
[target]
type = "gaussian"
dim = 1

[estimator]
k = 0
m = 10
R = 8
"#,
    );
    let mut texts = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(format!("out-{seed}"));
        let output = umcmc()
            .args(["run", "--config"])
            .arg(&cfg)
            .args(["--seed", seed, "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert_eq!(output.status.code(), Some(0), "stderr: {}", stderr_of(&output));
        texts.push(std::fs::read_to_string(out.join("estimates.csv")).unwrap());
    }
    assert_ne!(texts[0], texts[1]);
}

#[test]
fn unknown_config_keys_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    write(
        &cfg,
        r#"
[target]
type = "gaussian"
dim = 1

[estimator]
k = 0
m = 10
R = 8

[run]
typo_key = 1
"#,
    );
    let output = umcmc().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr_of(&output).contains("error"));
}

#[test]
fn inverted_window_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    write(
        &cfg,
        r#"
[target]
type = "gaussian"
dim = 1

[estimator]
k = 10
m = 5
R = 8
"#,
    );
    let output = umcmc().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr_of(&output).contains("estimator.m"));
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let output = umcmc()
        .args(["run", "--config", "/definitely/not/here.toml"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    let output = umcmc().output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let output = umcmc().arg("--help").output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&output.stdout);
    for sub in ["run", "certify", "meeting-times", "fit-cv"] {
        assert!(stdout.contains(sub), "--help should list `{sub}`");
    }
}

fn certify_config(dir: &Path, out: &Path, extra: &str) -> std::path::PathBuf {
    let coin = dir.join("coin.txt");
    write(&coin, FAIR_COIN);
    let cfg = dir.join("certify.toml");
    write(
        &cfg,
        &format!(
            r#"
[target]
type = "chain"
data_path = "coin.txt"
meet_prob = 0.5

[estimator]
k = 0
m = 0
R = 100

[run]
root_seed = 2
out_dir = "{}"

[certification]
eta = 2.0
h = [0.0, 1.0]
n_mc = 20000
replicates = 20000
{extra}
"#,
            out.display()
        ),
    );
    cfg
}

#[test]
fn honest_certification_exits_zero_and_writes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = certify_config(dir.path(), &out, "");
    let output = umcmc().args(["certify", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", stderr_of(&output));
    let report = std::fs::read_to_string(out.join("certification.csv")).unwrap();
    assert!(report.starts_with("check,index,empirical,se,bound,margin,status"));
    assert!(report.contains("sigma_bound"));
    assert!(!report.contains(",failed"));
}

#[test]
fn falsified_certification_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = certify_config(dir.path(), &out, "delta_scale = 0.5");
    let output = umcmc().args(["certify", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(2), "stderr: {}", stderr_of(&output));
    assert!(stderr_of(&output).contains("meeting_tail"));
    let report = std::fs::read_to_string(out.join("certification.csv")).unwrap();
    assert!(report.contains(",failed"));
}

#[test]
fn certify_without_a_certification_section_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("plain.toml");
    write(
        &cfg,
        r#"
[target]
type = "gaussian"
dim = 1

[estimator]
k = 0
m = 10
R = 8
"#,
    );
    let output = umcmc().args(["certify", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn meeting_times_prints_an_envelope_and_writes_every_tau() {
    let dir = tempfile::tempdir().unwrap();
    let coin = dir.path().join("coin.txt");
    write(&coin, FAIR_COIN);
    let out = dir.path().join("out");
    let cfg = dir.path().join("meet.toml");
    write(
        &cfg,
        &format!(
            r#"
[target]
type = "chain"
data_path = "coin.txt"
meet_prob = 0.5

[estimator]
k = 0
m = 0
R = 200

[run]
root_seed = 9
out_dir = "{}"
"#,
            out.display()
        ),
    );
    let output = umcmc()
        .args(["meeting-times", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", stderr_of(&output));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("tail envelope"), "stdout: {stdout}");
    let taus = std::fs::read_to_string(out.join("meeting_times.csv")).unwrap();
    assert_eq!(taus.lines().count(), 201, "header plus one row per replicate");
}

#[test]
fn fit_cv_prints_theta_and_writes_the_fit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("fit.toml");
    write(
        &cfg,
        &format!(
            r#"
[target]
type = "gaussian"
dim = 1

[estimator]
k = 5
m = 40
R = 64

[cv]
approach = "empirical"

[run]
root_seed = 4
out_dir = "{}"
"#,
            out.display()
        ),
    );
    let output = umcmc().args(["fit-cv", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", stderr_of(&output));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("theta = ["), "stdout: {stdout}");
    let fits = std::fs::read_to_string(out.join("cvfit.csv")).unwrap();
    assert!(fits.contains("cv-empirical"));
}

#[test]
fn unmet_chains_exit_three_and_flush_partial_meeting_times() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("stuck.toml");
    write(
        &cfg,
        &format!(
            r#"
[target]
type = "gaussian"
dim = 1

[kernel]
max_iterations = 1

[estimator]
k = 0
m = 0
R = 32

[run]
root_seed = 6
out_dir = "{}"
"#,
            out.display()
        ),
    );
    let output = umcmc().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(3), "stderr: {}", stderr_of(&output));
    assert!(stderr_of(&output).contains("partial meeting times"));
    let flushed = std::fs::read_to_string(out.join("meeting_times.csv")).unwrap();
    assert!(flushed.starts_with("replicate,tau"));
}
