//! End-to-end checks of the `bihard` binary: exit codes, output
//! reproducibility, and the event-log format.

use std::path::Path;
use std::process::{Command, Output};

fn bihard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bihard"))
        .args(args)
        .output()
        .expect("spawning bihard")
}

const SMALL: &[&str] = &["--l-g", "100.0", "--eps", "0.2", "--delta", "1.0"];

fn with_small(front: &[&str], back: &[&str]) -> Vec<String> {
    front
        .iter()
        .chain(SMALL)
        .chain(back)
        .map(|s| s.to_string())
        .collect()
}

#[test]
fn params_prints_json_and_exits_zero() {
    let args = with_small(&["params"], &[]);
    let args: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out = bihard(&args);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).expect("stdout is JSON");
    assert_eq!(v["n"], 4);
    assert_eq!(v["t_len"], 2);
    assert_eq!(v["mode"], "deterministic");
}

#[test]
fn verify_passes_on_a_valid_instance() {
    let args = with_small(&["verify"], &[]);
    let args: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out = bihard(&args);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.lines().count() >= 10,
        "expected one line per check:\n{text}"
    );
    assert!(text
        .lines()
        .all(|l| l.starts_with("PASS") || l.starts_with("INFO")));
}

#[test]
fn infeasible_class_exits_one_with_a_message() {
    // eps too coarse for the budget: chain length would be zero.
    let out = bihard(&["params", "--delta", "0.1", "--eps", "0.5"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error:"), "stderr: {err}");
}

#[test]
fn usage_errors_exit_two() {
    let out = bihard(&["trace", "--alg", "no_such_algorithm"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identical_invocations_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| -> Vec<u8> {
        let path = dir.path().join(name);
        let path_s = path.to_str().unwrap().to_string();
        let args = with_small(
            &["trace", "--alg", "greedy_prober"],
            &["--seed", "7", "--out", &path_s],
        );
        let args: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        let out = bihard(&args);
        assert!(
            out.status.success(),
            "stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::read(&path).unwrap()
    };
    let a = run("a.json");
    let b = run("b.json");
    assert!(!a.is_empty());
    assert_eq!(a, b, "same seed and class must reproduce the same bytes");
}

#[test]
fn event_log_is_json_lines_with_expected_fields() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let log_s = log.to_str().unwrap().to_string();
    let args = with_small(
        &["trace", "--alg", "greedy_prober", "--check-shape"],
        &["--log", &log_s],
    );
    let args: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out = bihard(&args);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&log).unwrap();
    let mut last_query = 0u64;
    let mut lines = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("JSONL event");
        for key in ["query", "variable", "index", "trigger"] {
            assert!(v.get(key).is_some(), "missing {key} in {line}");
        }
        let q = v["query"].as_u64().unwrap();
        assert!(q >= last_query, "events must be query-ordered");
        last_query = q;
        lines += 1;
    }
    // n = 4, T = 2: twelve y coordinates and two x coordinates activate.
    assert_eq!(lines, 14);
    assert!(!Path::new(&format!("{log_s}.tmp")).exists());
}

#[test]
fn bench_reports_fit_when_enough_points() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.json");
    let path_s = path.to_str().unwrap().to_string();
    let out = bihard(&[
        "bench",
        "--grid",
        "kappa=17,26,37,50",
        "--eps",
        "0.2",
        "--delta",
        "10.0",
        "--out",
        &path_s,
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(v["runs"].as_array().unwrap().len(), 4);
    let slope = v["fits"]["kappa_sweep"]["slope"].as_f64().unwrap();
    assert!(
        slope > 0.5 && slope < 2.5,
        "slope {slope} out of sanity range"
    );
}

#[test]
fn bench_without_a_grid_is_a_usage_error() {
    let out = bihard(&["bench"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--grid"));
}

#[test]
fn bench_rejects_a_sigma_axis() {
    let out = bihard(&["bench", "--grid", "sigma=0.5,1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kappa and eps"));
}

#[test]
fn verify_grid_certifies_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.json");
    let path_s = path.to_str().unwrap().to_string();
    let out = bihard(&[
        "verify", "--grid", "kappa=25", "--grid", "eps=0.2", "--seed", "3", "--out", &path_s,
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    // One deterministic suite plus one per default sigma in {0.5, 1}.
    let headers: Vec<&str> = text.lines().filter(|l| l.starts_with("== ")).collect();
    assert_eq!(headers.len(), 3, "stdout:\n{text}");
    assert!(headers[0].contains("sigma 0 mode det"));
    assert!(headers[1].contains("sigma 0.5 mode stoc"));
    assert!(headers[2].contains("sigma 1 mode stoc"));
    assert!(text.lines().any(|l| l == "grid: 3/3 instances passed"));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert!(v["suite_version"].is_string());
    let instances = v["instances"].as_array().unwrap();
    assert_eq!(instances.len(), 3);
    for inst in instances {
        assert_eq!(inst["fc"]["l_g"], 25.0);
        assert!(inst["derived"]["n"].is_number());
        for r in inst["results"].as_array().unwrap() {
            let status = r["status"].as_str().unwrap();
            assert!(status == "pass" || status == "info", "failing check: {r}");
        }
    }
}

#[test]
fn verify_grid_conflicts_with_single_instance_flags() {
    let out = bihard(&["verify", "--grid", "--eps", "0.1"]);
    assert_eq!(out.status.code(), Some(2));
}
