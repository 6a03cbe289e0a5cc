// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::Command;

use nalgebra::DMatrix;
use proptest::prelude::*;
use serde_json::Value;
use tempfile::TempDir;

use varseg_cli::cli_main;
use varseg_cli::io::{load_csv, load_result, save_csv, save_result, RunManifest};
use varseg_core::{DetectionResult, TimeSeries};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["varseg"];
    argv.extend_from_slice(args);
    let code = cli_main(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = Command::new(env!("CARGO_BIN_EXE_varseg")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_varseg"))
        .args(["detect", "x.csv", "--bogus"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn runtime_errors_exit_1() {
    let dir = TempDir::new().unwrap();
    let (code, _, err) = run(&["detect", &p(&dir, "missing.csv")]);
    assert_eq!(code, 1);
    assert!(err.contains("missing.csv"));
}

#[test]
fn help_exits_0() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("select-lag"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn csv_round_trip_is_exact(rows in 2usize..12, cols in 1usize..5, seed in any::<u64>()) {
        let dir = TempDir::new().unwrap();
        let mut state = seed | 1;
        let vals = DMatrix::from_fn(rows, cols, |_, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            f64::from_bits((state >> 2) | 0x3000_0000_0000_0000) * if state & 1 == 0 { 1.0 } else { -1.0 }
        });
        let ts = TimeSeries::new(vals).unwrap();
        let path = dir.path().join("x.csv");
        save_csv(&ts, &path).unwrap();
        prop_assert_eq!(load_csv(&path).unwrap(), ts);
    }
}

#[test]
fn result_round_trip_and_empty_change_points() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("r.json");
    let res = DetectionResult {
        change_points: vec![],
        sparse_mats: vec![DMatrix::from_row_slice(2, 2, &[0.1, 1.0 / 3.0, -2e-17, 0.0])],
        lowrank_mats: Some(vec![DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])]),
        lag: 1,
        elapsed_seconds: 0.25,
    };
    save_result(&res, RunManifest::new("detect", Default::default()), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"change_points\": []"));
    assert_eq!(load_result(&path).unwrap().result().unwrap(), res);
}

fn check_manifest(v: &Value) {
    let m = &v["manifest"];
    for key in ["command", "started", "finished", "tool_version"] {
        assert!(m[key].is_string(), "manifest.{key}");
    }
    assert!(m["config"].is_object());
}

/// Documented result schema, version 1.
fn check_result_schema(v: &Value) {
    assert_eq!(v["schema_version"], 1);
    assert!(v["change_points"].as_array().unwrap().iter().all(Value::is_u64));
    assert!(v["lag"].is_u64());
    assert!(v["elapsed_seconds"].is_f64());
    let segs = v["sparse_mats"].as_array().unwrap();
    assert_eq!(segs.len(), v["change_points"].as_array().unwrap().len() + 1);
    for s in segs {
        for row in s.as_array().unwrap() {
            assert!(row.as_array().unwrap().iter().all(Value::is_number));
        }
    }
    assert!(v["lowrank_mats"].is_null() || v["lowrank_mats"].is_array());
    check_manifest(v);
}

#[test]
fn simulate_detect_evaluate_pipeline() {
    let dir = TempDir::new().unwrap();
    let (data, truth, result, summary) = (p(&dir, "d.csv"), p(&dir, "t.json"), p(&dir, "r.json"), p(&dir, "s.json"));
    let spec = ["--t-len", "400", "--p", "3", "--breaks", "201", "--signals", "-0.8,0.8", "--seed", "3"];

    let mut args = vec!["simulate", "--out", &data, "--truth", &truth];
    args.extend_from_slice(&spec);
    let (code, out, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("manifest digest: "));
    let t: Value = serde_json::from_str(&std::fs::read_to_string(&truth).unwrap()).unwrap();
    assert_eq!(t["break_points"], serde_json::json!([201]));
    assert_eq!(t["manifest"]["seed"], 3);

    let (code, out, err) = run(&["detect", &data, "--algo", "tbss", "--out", &result]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("manifest digest: "));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&result).unwrap()).unwrap();
    check_result_schema(&r);
    let digest = varseg_cli::io::sha256_hex(&std::fs::read(&data).unwrap());
    assert_eq!(r["manifest"]["input_digest"], Value::String(digest));
    let cps: Vec<u64> = r["change_points"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(cps.len(), 1);
    assert!(cps[0].abs_diff(201) <= 10, "{cps:?}");

    let mut args = vec!["evaluate", "--nreps", "1", "--out", &summary];
    args.extend_from_slice(&spec);
    let (code, out, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("Selection rate"));
    let s: Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(s["schema_version"], 1);
    assert_eq!(s["rows"][0]["selection_rate"], 1.0);
    check_manifest(&s);
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = TempDir::new().unwrap();
    let cfg = p(&dir, "run.cfg");
    std::fs::write(
        &cfg,
        "# strong toy\nt-len = 300\np = 3\nbreaks = 151\nsignals = -0.8,0.8\nseed = 7\n",
    )
    .unwrap();
    let (a, b) = (p(&dir, "a.csv"), p(&dir, "b.csv"));
    assert_eq!(run(&["simulate", "--config", &cfg, "--out", &a]).0, 0);
    assert_eq!(run(&["simulate", "--config", &cfg, "--out", &b, "--seed", "8"]).0, 0);
    let (ta, tb) = (load_csv(Path::new(&a)).unwrap(), load_csv(Path::new(&b)).unwrap());
    assert_eq!(ta.len(), 300);
    assert_ne!(ta, tb);
    let (c, d) = (p(&dir, "c.csv"), p(&dir, "d.csv"));
    run(&["simulate", "--config", &cfg, "--out", &c, "--seed", "8"]);
    run(&["simulate", "--t-len", "300", "--p", "3", "--breaks", "151", "--signals", "-0.8,0.8", "--seed", "8", "--out", &d]);
    assert_eq!(std::fs::read(&c).unwrap(), std::fs::read(&d).unwrap());

    std::fs::write(&cfg, "nonsense = 1\n").unwrap();
    assert_eq!(run(&["simulate", "--config", &cfg, "--out", &a]).0, 2);
}

#[test]
fn plots_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let (data, result) = (p(&dir, "d.csv"), p(&dir, "r.json"));
    run(&["simulate", "--t-len", "300", "--p", "4", "--breaks", "151", "--signals", "-0.8,0.8", "--out", &data]);
    assert_eq!(run(&["detect", &data, "--out", &result]).0, 0);
    for kind in ["cp", "param", "density", "granger"] {
        for layout in ["circle", "star", "nicely"] {
            let (a, b) = (p(&dir, &format!("{kind}-{layout}-a.svg")), p(&dir, &format!("{kind}-{layout}-b.svg")));
            for out in [&a, &b] {
                let (code, _, err) = run(&["plot", "--result", &result, "--data", &data, "--kind", kind, "--layout", layout, "--out", out]);
                assert_eq!(code, 0, "{err}");
            }
            if kind == "granger" {
                for seg in 1..=2 {
                    let sa = std::fs::read(a.replace("-a.svg", &format!("-a-seg{seg}.svg"))).unwrap();
                    let sb = std::fs::read(b.replace("-b.svg", &format!("-b-seg{seg}.svg"))).unwrap();
                    assert_eq!(sa, sb);
                }
            } else {
                assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
            }
        }
    }
    let (code, _, _) = run(&["plot", "--result", &result, "--kind", "pie", "--out", &p(&dir, "x.svg")]);
    assert_eq!(code, 2);
    let (code, _, _) = run(&["plot", "--result", &result, "--kind", "cp", "--out", &p(&dir, "x.svg")]);
    assert_eq!(code, 2);
}

#[test]
fn select_lag_rejects_out_of_range() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "d.csv");
    run(&["simulate", "--t-len", "200", "--p", "3", "--signals", "0.5", "--out", &data]);
    assert_eq!(run(&["select-lag", &data, "--max-lag", "9"]).0, 2);
}
