//! End-to-end checks of the compiled binary: happy paths for every
//! subcommand plus the documented exit codes for bad input.

use std::fs;
use std::process::{Command, Output};

use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mofsteer"))
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn run_prints_a_summary_and_writes_a_parseable_log() {
    let dir = tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let out = bin()
        .args(["run", "--nodes", "8", "--horizon", "300", "--seed", "9", "--top", "3", "--out"])
        .arg(&log)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));

    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(stats["completed"]["generate_linkers"].as_u64().unwrap() > 0);
    assert!(stats["final_version"].as_u64().unwrap() >= 1);
    assert!(stats.get("top_frameworks").is_some());

    let text = fs::read_to_string(&log).unwrap();
    assert!(text.lines().count() > 100, "log too small");
    for line in text.lines() {
        let _: serde_json::Value = serde_json::from_str(line).expect("jsonl line");
    }
}

#[test]
fn top_frameworks_rank_by_uptake_and_keep_field_scales_straight() {
    // Needs two simulated hours: the first uptake chain (optimize, charges,
    // adsorption) takes ~3650s from a cold start at this scale.
    let out = bin()
        .args(["run", "--nodes", "32", "--horizon", "7200", "--seed", "77", "--top", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = stats["top_frameworks"].as_array().unwrap();
    assert!(!rows.is_empty(), "no confirmed uptake after two hours");
    let caps: Vec<f64> = rows.iter().map(|r| r["capacity"].as_f64().unwrap()).collect();
    for pair in caps.windows(2) {
        assert!(pair[0] >= pair[1], "not ranked by uptake: {caps:?}");
    }
    for row in rows {
        // selected frameworks sit near the strict strain threshold; uptake
        // for low-strain frameworks is well above 1
        let strain = row["strain"].as_f64().unwrap();
        let capacity = row["capacity"].as_f64().unwrap();
        assert!(strain < 0.5, "strain field holds {strain}, not a strain");
        assert!(capacity > 0.5, "capacity field holds {capacity}, not an uptake");
    }
}

#[test]
fn run_on_the_live_backend_completes_quickly_at_small_scale() {
    let out = bin()
        .args(["run", "--backend", "local", "--nodes", "8", "--horizon", "300", "--seed", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(stats["completed"]["generate_linkers"].as_u64().unwrap() > 0);
}

#[test]
fn report_summarizes_and_audits_a_recorded_log() {
    let dir = tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let run = bin()
        .args(["run", "--nodes", "8", "--horizon", "600", "--seed", "11", "--out"])
        .arg(&log)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", stderr_of(&run));

    let out = bin()
        .args(["report", "--window-start", "120", "--audit"])
        .arg(&log)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("utilization"), "{text}");
    assert!(text.contains("throughput"), "{text}");
    assert!(text.contains("audit:"), "{text}");
    assert!(text.contains("0 violations"), "{text}");
}

#[test]
fn sweep_prints_one_row_per_size_and_writes_csv() {
    let dir = tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = bin()
        .args([
            "sweep",
            "--sizes",
            "8,16",
            "--horizon",
            "900",
            "--window-start",
            "300",
            "--seed",
            "5",
            "--out",
        ])
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 3, "{text}");

    let table = fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("nodes,"), "{table}");
    assert_eq!(table.lines().count(), 3, "{table}");
}

#[test]
fn compare_reports_both_arms() {
    let out = bin()
        .args(["compare", "--nodes", "8", "--horizon", "900", "--seeds", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("ablation: retraining"), "{text}");
    assert!(text.contains("final hits:"), "{text}");
}

#[test]
fn calibrate_reports_an_unbracketed_target_without_failing() {
    let out = bin()
        .args([
            "calibrate",
            "--nodes", "8",
            "--horizon", "600",
            "--seeds", "1",
            "--lo", "1e-6",
            "--hi", "2e-6",
            "--steps", "1",
            "--target", "0.99",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["bracketed"], serde_json::json!(false));
}

#[test]
fn config_print_default_is_loadable() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("default.toml");
    let out = bin().args(["config", "--print-default"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("schema_version"), "{text}");
    fs::write(&path, out.stdout).unwrap();

    let check = bin().args(["config", "--check"]).arg(&path).output().unwrap();
    assert!(check.status.success(), "{}", stderr_of(&check));
    assert!(String::from_utf8_lossy(&check.stdout).contains("ok:"));
}

#[test]
fn invalid_config_exits_with_code_one() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "horizon_s = -5.0\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("horizon"), "{}", stderr_of(&out));
}

#[test]
fn missing_config_exits_with_code_one() {
    let out = bin()
        .args(["run", "--config", "/definitely/not/here.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stderr_of(&out));
}

#[test]
fn oversized_live_partition_exits_with_code_two() {
    let out = bin()
        .args(["run", "--backend", "local", "--nodes", "450", "--horizon", "60"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("worker threads"), "{}", stderr_of(&out));
}
