#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kvicreg_core::train::TrainConfig;

pub fn kvicreg() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kvicreg"));
    cmd.env_remove("KVICREG_THREADS");
    cmd
}

pub fn run(args: &[&str]) -> Output {
    kvicreg().args(args).output().expect("binary runs")
}

pub fn write_config(dir: &Path, name: &str, config: &TrainConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, config.to_json()).unwrap();
    path
}

/// Parsed `metrics.csv`: the header and one vector of values per row.
pub fn read_metrics(path: &Path) -> (String, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

/// Test accuracy from a `probe.json` written by the probe command.
pub fn probe_accuracy(out_dir: &Path) -> f64 {
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("probe.json")).unwrap()).unwrap();
    v["test_accuracy"].as_f64().unwrap()
}

/// Prints the one-line verdict and fails the test when `ok` is false.
pub fn verdict(criterion: u32, ok: bool, detail: String) {
    println!("criterion {criterion}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion} failed: {detail}");
}
