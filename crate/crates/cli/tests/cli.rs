use std::path::Path;
use std::process::{Command, Output};

use iqctube::config::ProjectConfig;
use iqctube::pipeline::CertificateFile;

fn iqctube(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iqctube")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn shipped_example_config_matches_builtin() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.json");
    let shipped = ProjectConfig::load(&path).unwrap();
    assert_eq!(shipped, ProjectConfig::example());
}

#[test]
fn init_writes_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = iqctube(&["init", "--path", "c.json"], dir.path());
    assert_eq!(code(&o), 0);
    let cfg = ProjectConfig::load(&dir.path().join("c.json")).unwrap();
    assert_eq!(cfg, ProjectConfig::example());
}

#[test]
fn config_errors_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&iqctube(&["synthesize", "--config", "missing.json"], dir.path())), 4);
    assert_eq!(code(&iqctube(&["simulate", "--nu", "sometimes"], dir.path())), 4);
    assert_eq!(code(&iqctube(&["synthesize", "--rho", "1.5"], dir.path())), 4);
    std::fs::write(dir.path().join("bad.json"), "{ \"rho\": ").unwrap();
    assert_eq!(code(&iqctube(&["synthesize", "--config", "bad.json"], dir.path())), 4);
    assert_eq!(code(&iqctube(&["frobnicate"], dir.path())), 4);
}

#[test]
fn uncertainty_too_large_to_certify_is_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ProjectConfig::example();
    cfg.uncertainty.bound = 50.0;
    std::fs::write(dir.path().join("big.json"), cfg.to_json().unwrap()).unwrap();
    let o = iqctube(&["synthesize", "--config", "big.json", "--out", "o"], dir.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synthesize_then_simulate_reuses_the_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let o = iqctube(&["synthesize", "--out", "o"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("o/certificate.json")).unwrap();
    let file = CertificateFile::from_json(&text).unwrap();
    assert_eq!(file.row_gammas().len(), 6);

    let o = iqctube(&["simulate", "--out", "o", "--seeds", "2", "--steps", "4", "--nu", "fixed1"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!String::from_utf8_lossy(&o.stderr).contains("synthesizing"));
    let csv = std::fs::read_to_string(dir.path().join("o/runs_fixed1/seed_0000.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/summary_fixed1.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn report_writes_table_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = iqctube(&["report", "--out", "r", "--seeds", "2", "--steps", "3"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let md = std::fs::read_to_string(dir.path().join("r/report.md")).unwrap();
    assert!(md.contains("nu fixed1") && md.contains("nu optimize"));
    for f in ["report.json", "tube_fixed1.csv", "tube_optimize.csv", "summary_optimize.json"] {
        assert!(dir.path().join("r").join(f).exists(), "{f} missing");
    }
}
