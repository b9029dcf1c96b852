use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn siprelay(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siprelay")).args(args).output().unwrap()
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn tmp(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("siprelay-{}-{name}", std::process::id()))
}

#[test]
fn every_example_scenario_meets_its_expectation() {
    let mut seen = 0;
    for entry in std::fs::read_dir(scenarios()).unwrap() {
        let path = entry.unwrap().path();
        let out = siprelay(&["run", "--scenario", path.to_str().unwrap()]);
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert_eq!(out.status.code(), Some(0), "{}\n{stdout}", path.display());
        assert!(stdout.lines().last().unwrap().starts_with("outcome "));
        seen += 1;
    }
    assert!(seen >= 5);
}

#[test]
fn run_writes_report_and_overrides_mode() {
    let report = tmp("run.json");
    let basic = scenarios().join("basic_call.json");
    let out = siprelay(&[
        "run",
        "--scenario",
        basic.to_str().unwrap(),
        "--mode",
        "baseline",
        "--seed",
        "9",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["mode"], "baseline");
    assert_eq!(json["seed"], 9);
    assert_eq!(json["allocation_transactions"], 4);
    assert!(json["events"].as_array().unwrap().len() > 10);
    std::fs::remove_file(report).unwrap();

    // Direct media between these NATs fails, so the file's expectation no longer holds.
    let out = siprelay(&["run", "--scenario", basic.to_str().unwrap(), "--mode", "naive"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn matrix_reports_all_pairings() {
    let report = tmp("matrix.json");
    let out = siprelay(&["matrix", "--modes", "adapted,naive", "--packets", "10", "--report", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let cells: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(cells.len(), 32);
    assert!(cells.iter().filter(|c| c["mode"] == "adapted").all(|c| c["outcome"] == "media-ok"));
    std::fs::remove_file(report).unwrap();
}

#[test]
fn bad_input_exits_with_two() {
    assert_eq!(siprelay(&["run", "--scenario", "/nonexistent/x.json"]).status.code(), Some(2));
    let bad = tmp("bad.json");
    std::fs::write(&bad, r#"{"nat_a":"full-cone","nat_b":"cgnat","script":[]}"#).unwrap();
    let out = siprelay(&["run", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cgnat"));
    std::fs::remove_file(bad).unwrap();
    assert_eq!(siprelay(&["matrix", "--modes", "sideways"]).status.code(), Some(2));
}
