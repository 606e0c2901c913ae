use std::path::Path;
use std::process::{Command, Output};

use ltv_observer_cli::config::{paper_config, PAPER_SCENARIO, THREE_STATE_SCENARIO};
use ltv_observer_cli::export::CsvTable;
use ltv_observer_cli::report::{summarize, Residuals};
use ltv_observer_cli::scenario::{run_scenario, write_artifacts, CSV_FILE, REPORT_FILE};

fn ltvobs(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltvobs"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "good.scenario", PAPER_SCENARIO);
    let out = ltvobs(&["verify", &good], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("conditions hold"));

    let wrong_n = PAPER_SCENARIO.replace("N = [-4.0, 4.0]", "N = [-4.0, 3.0]");
    let bad = write(dir.path(), "bad.scenario", &wrong_n);
    assert_eq!(ltvobs(&["verify", &bad], dir.path()).status.code(), Some(4));

    let broken = write(dir.path(), "broken.scenario", "");
    let out = ltvobs(&["verify", &broken], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("system.A0"));

    let missing = dir.path().join("nope.scenario");
    assert_eq!(
        ltvobs(&["verify", &missing.to_string_lossy()], dir.path()).status.code(),
        Some(2)
    );
}

#[test]
fn run_reports_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let text = PAPER_SCENARIO.replace("[\"0.1\", \"1 - 0.5*cos(2*t)\"]", "[\"400\", \"1 - 0.5*cos(2*t)\"]");
    let path = write(dir.path(), "unstable.scenario", &text);
    let out = ltvobs(&["run", &path, "--horizon", "5"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("observe stage"));
}

#[test]
fn bad_flag_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ltvobs(&["reproduce-paper", "--dt", "-1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_with_overrides_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "paper.scenario", PAPER_SCENARIO);
    let out = ltvobs(
        &["run", &path, "--horizon", "2", "--decimate", "10", "--mode", "cascade", "--noise", "0.001", "--out", "res"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = CsvTable::read(&dir.path().join("res").join(CSV_FILE)).unwrap();
    assert_eq!(table.rows(), 201);
    assert!(dir.path().join("res/theta_error.svg").exists());
}

#[test]
fn zero_horizon_run_has_no_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = ltvobs(&["reproduce-paper", "--horizon", "0", "--out", "empty"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("no data"));
    let csv = std::fs::read_to_string(dir.path().join("empty").join(CSV_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn batch_runs_each_file_into_its_own_directory() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("inputs");
    std::fs::create_dir(&inputs).unwrap();
    write(&inputs, "a.scenario", PAPER_SCENARIO);
    write(&inputs, "b.scenario", THREE_STATE_SCENARIO);
    write(&inputs, "notes.txt", "ignored");
    let out = ltvobs(&["batch", "inputs", "--horizon", "3", "--out", "batch"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["a", "b"] {
        assert!(dir.path().join("batch").join(name).join(REPORT_FILE).exists());
    }
    assert!(!dir.path().join("batch/notes").exists());

    write(&inputs, "c.scenario", "name = 3");
    let out = ltvobs(&["batch", "inputs", "--horizon", "1", "--out", "batch2"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_is_recomputable_from_csv() {
    let mut cfg = paper_config();
    cfg.horizon = 20.0;
    cfg.ident.freq_stage = 10.0;
    cfg.output.decimate = 5;
    let outcome = run_scenario(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_artifacts(&outcome, &cfg, dir.path()).unwrap();
    let table = CsvTable::read(&dir.path().join(CSV_FILE)).unwrap();
    let again = summarize(&cfg.name, &table, &cfg.thetas, Some(Residuals::from(&outcome.conditions)));
    assert_eq!(again, outcome.report);
    let text = std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
    assert_eq!(text, again.to_string());
}
