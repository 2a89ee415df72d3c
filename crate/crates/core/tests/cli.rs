use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_expotwist");

fn write_config(dir: &std::path::Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p
}

const QUADRATIC: &str = r#"
[model]
family = "bm"

[cost]
terminal = "quadratic"
gamma = 0.5

[grid]
T = 1.0
n_steps = 100

[run]
n_paths = 8000
seed = 7
pipelines = ["reweight", "checks"]
"#;

#[test]
fn quadratic_run_reports_minus_log_z() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUADRATIC);
    let out = dir.path().join("out");
    let status = Command::new(BIN)
        .arg("run")
        .arg(&cfg)
        .arg("-o")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let table = expotwist::report::Table::parse(&summary).unwrap();
    assert_eq!(
        table.header,
        ["check", "value", "expected", "tolerance", "pass"]
    );
    let row = table.rows.iter().find(|r| r[0] == "minus_log_Z").unwrap();
    let expected: f64 = row[2].parse().unwrap();
    assert!((expected - 0.5 * 2f64.ln()).abs() < 1e-12);
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert!(manifest.contains("seed,master,7"));
    assert!(manifest.contains("file,entropy_report.csv,"));
}

#[test]
fn injected_wrong_drift_fails_the_martingale_check() {
    let dir = tempfile::tempdir().unwrap();
    let body = QUADRATIC.replace(
        "pipelines = [\"reweight\", \"checks\"]",
        "pipelines = [\"checks\"]\ninject_uncorrected_drift = true",
    );
    let cfg = write_config(dir.path(), &body);
    let out = Command::new(BIN)
        .arg("run")
        .arg(&cfg)
        .arg("-o")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout
        .lines()
        .any(|l| l.starts_with("martingale_max_z") && l.ends_with("FAIL")));
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &QUADRATIC.replace("gamma", "gama"));
    let out = Command::new(BIN).arg("check").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gama"));
}

#[test]
fn missing_config_is_a_runtime_error() {
    let out = Command::new(BIN)
        .args(["run", "/nonexistent/run.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn oracle_prints_benchmark_values() {
    let out = Command::new(BIN)
        .args(["oracle", "poisson-linear"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let minus_log_z: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("minus_log_Z,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((minus_log_z - 1.0).abs() < 1e-15);
    let unknown = Command::new(BIN).args(["oracle", "nope"]).status().unwrap();
    assert_eq!(unknown.code(), Some(2));
}

#[test]
fn seed_env_var_is_the_default() {
    let dir = tempfile::tempdir().unwrap();
    let body = QUADRATIC
        .replace("seed = 7\n", "")
        .replace("n_paths = 8000", "n_paths = 200");
    let cfg = write_config(dir.path(), &body);
    let out = dir.path().join("o");
    let status = Command::new(BIN)
        .env("EXPOTWIST_SEED", "99")
        .args([
            "run".as_ref(),
            cfg.as_os_str(),
            "-o".as_ref(),
            out.as_os_str(),
        ])
        .status()
        .unwrap();
    assert!(status.code().is_some_and(|c| c <= 1));
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert!(manifest.contains("seed,master,99"));
}
