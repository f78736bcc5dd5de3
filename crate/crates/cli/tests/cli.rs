use std::process::{Command, Output};

use serde_json::Value;

fn nodeagg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nodeagg"))
        .args(args)
        .env_clear()
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

const SMALL: &[&str] = &["--nodes", "2", "--ppn", "2", "--wpp", "2", "--g", "64"];

fn with_small<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(SMALL).chain(tail).copied().collect()
}

#[test]
fn predict_prints_all_quantities() {
    let v = json(&nodeagg(&[
        "predict", "--scheme", "ww", "--g", "1024", "--N", "128", "--t", "16", "--z", "1000000",
    ]));
    assert_eq!(v["bounds"]["lower"], 977);
    assert_eq!(v["bounds"]["upper"], 3024.5625);
    assert_eq!(v["grouping_ops"], 1040);
    assert_eq!(v["latency_penalty_ns"], "unbounded");
    assert_eq!(v["memory"]["per_core_bytes"], 1024 * 8 * 128 * 16);
}

#[test]
fn histogram_report_is_consistent() {
    let v = json(&nodeagg(&with_small(&["histogram"], &["--updates", "1000", "--scheme", "wsp"])));
    assert_eq!(v["scheme"], "wsp");
    assert_eq!(v["produced"], 8000);
    assert_eq!(v["delivered"], 8000);
    assert_eq!(v["table_total"], 8000);
    let sent = v["messages_sent"].as_u64().unwrap();
    assert_eq!(sent, v["full_messages"].as_u64().unwrap() + v["flush_messages"].as_u64().unwrap());
}

#[test]
fn sequential_output_is_byte_identical() {
    for bench in ["histogram", "ig", "sssp", "phold", "pingack"] {
        let args = with_small(&[bench], &["--scheme", "pp", "--seed", "7"]);
        let a = nodeagg(&args);
        let b = nodeagg(&args);
        assert!(a.status.success(), "{bench}: {}", String::from_utf8_lossy(&a.stderr));
        assert_eq!(a.stdout, b.stdout, "{bench}");
    }
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        vec!["histogram", "--scheme", "xx"],
        vec!["histogram", "--nodes", "0"],
        vec!["histogram", "--clock", "wall"],
        vec!["predict", "--g", "0"],
    ] {
        let out = nodeagg(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn timeout_exits_4_with_diagnostics() {
    let out = nodeagg(&with_small(&["histogram"], &["--updates", "100000", "--timeout-ms", "0"]));
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("did not quiesce"), "{err}");
}

#[test]
fn none_scheme_sends_single_item_messages() {
    let v = json(&nodeagg(&with_small(&["histogram"], &["--updates", "200", "--scheme", "none"])));
    assert_eq!(v["scheme"], "ww");
    assert_eq!(v["g"], 1);
    assert_eq!(v["flush_messages"], 0);
}

#[test]
fn output_file_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("run.json");
    let trace_path = dir.path().join("trace.jsonl");
    let out = nodeagg(&with_small(
        &["ig"],
        &[
            "--requests",
            "100",
            "--output",
            out_path.to_str().unwrap(),
            "--trace",
            trace_path.to_str().unwrap(),
        ],
    ));
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let trace = std::fs::read_to_string(&trace_path).unwrap();
    let lines: Vec<Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len() as u64, v["messages_sent"].as_u64().unwrap());
    assert!(lines.iter().all(|r| r["k"].as_u64().unwrap() >= 1));
}

#[test]
fn env_overrides_defaults() {
    let out = Command::new(env!("CARGO_BIN_EXE_nodeagg"))
        .args(with_small(&["histogram"], &["--updates", "100"]))
        .env_clear()
        .env("AGG_SCHEME", "pp")
        .output()
        .unwrap();
    assert_eq!(json(&out)["scheme"], "pp");
}

#[test]
fn sweep_csv_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = nodeagg(&[
        "sweep", "--schemes", "ww,wps,wsp,pp", "--gs", "32,64", "--csv", csv.to_str().unwrap(), "histogram",
        "--updates", "300",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 9);
    assert!(lines[0].starts_with("benchmark,scheme,"));
    assert!(lines[1].starts_with("histogram,ww,") && lines[1].contains(",32,"));
}

#[test]
fn empty_sweep_is_header_only() {
    let out = nodeagg(&["sweep", "--gs", "", "histogram", "--updates", "10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 1);
}

#[test]
fn pingack_ppn_list_keeps_workers_per_node() {
    let v = json(&nodeagg(&[
        "pingack", "--scheme", "none", "--ppn", "1", "--wpp", "4", "--ppn-list", "1,2,4", "--messages", "50",
    ]));
    let runs = v["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    for (run, ppn) in runs.iter().zip([1, 2, 4]) {
        assert_eq!(run["topo"]["ppn"], ppn);
        assert_eq!(run["topo"]["wpp"], 4 / ppn);
        assert_eq!(run["acks"], 4);
    }
    let bad = nodeagg(&["pingack", "--ppn", "1", "--wpp", "4", "--ppn-list", "3"]);
    assert_eq!(bad.status.code(), Some(2));
}
