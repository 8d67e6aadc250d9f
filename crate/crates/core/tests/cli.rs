use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const PADDING_SRC: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/plugins/padding.fasm");

fn fan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fan")).args(args).output().expect("run fan")
}

fn ok(args: &[&str]) -> String {
    let out = fan(args);
    assert!(out.status.success(), "fan {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    fan(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Signing key plus a trust directory holding its public half.
fn keyed(dir: &Path) -> (PathBuf, PathBuf) {
    let key = dir.join("dev.key");
    ok(&["keygen", "-o", s(&key)]);
    let trust = dir.join("trust");
    fs::create_dir(&trust).unwrap();
    let public =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).find(|p| p.extension().is_some_and(|x| x == "pub"));
    let public = public.expect("public key written");
    fs::copy(&public, trust.join(public.file_name().unwrap())).unwrap();
    (key, trust)
}

fn padding_package(dir: &Path, key: &Path) -> PathBuf {
    let out = dir.join("padding.fanp");
    ok(&[
        "package",
        "--code",
        PADDING_SRC,
        "--name",
        "padding",
        "--caps",
        "LOG,STATE_READ,STATE_WRITE,CELL_EMIT,TIMER",
        "--feature",
        "32",
        "--entry",
        "on_attach=on_attach",
        "--entry",
        "on_timer=on_timer",
        "--entry",
        "on_feature_cell=on_feature_cell",
        "--entry",
        "on_circuit_teardown=on_circuit_teardown",
        "--key",
        s(key),
        "-o",
        s(&out),
    ]);
    out
}

#[test]
fn asm_disasm_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("a.bin");
    ok(&["asm", PADDING_SRC, "-o", s(&bin)]);
    let text = ok(&["disasm", s(&bin)]);
    let again = dir.path().join("b.fasm");
    fs::write(&again, &text).unwrap();
    let bin2 = dir.path().join("b.bin");
    ok(&["asm", s(&again), "-o", s(&bin2)]);
    assert_eq!(fs::read(&bin).unwrap(), fs::read(&bin2).unwrap());
}

#[test]
fn package_verify_and_tamper() {
    let dir = tempfile::tempdir().unwrap();
    let (key, trust) = keyed(dir.path());
    let pkg = padding_package(dir.path(), &key);
    ok(&["verify", s(&pkg), "--trust", s(&trust)]);
    assert!(ok(&["disasm", s(&pkg)]).contains("padding"));

    let mut bytes = fs::read(&pkg).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    let bad = dir.path().join("bad.fanp");
    fs::write(&bad, bytes).unwrap();
    assert_eq!(code(&["verify", s(&bad), "--trust", s(&trust)]), 1);

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&["verify", s(&pkg), "--trust", s(&empty)]), 1);
}

#[test]
fn repository_flow() {
    let dir = tempfile::tempdir().unwrap();
    let (key, trust) = keyed(dir.path());
    let pkg = padding_package(dir.path(), &key);
    let repo = dir.path().join("repo");
    ok(&["repo", "init", s(&repo), "--key", s(&key)]);
    ok(&["repo", "add", s(&repo), s(&pkg)]);
    // Unsigned targets do not meet the threshold.
    assert_eq!(code(&["verify", s(&pkg), "--trust", s(&trust), "--repo", s(&repo)]), 1);
    ok(&["repo", "sign", s(&repo), "--key", s(&key)]);
    ok(&["verify", s(&pkg), "--trust", s(&trust), "--repo", s(&repo)]);
    ok(&["repo", "set-expiry", s(&repo), "2001-01-01T00:00:00Z"]);
    ok(&["repo", "sign", s(&repo), "--key", s(&key)]);
    assert_eq!(code(&["verify", s(&pkg), "--trust", s(&trust), "--repo", s(&repo)]), 1);
}

#[test]
fn sim_run_shipped_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let scenario = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/unknown_feature.json");
    ok(&["sim", "run", scenario, "--trace", s(&trace)]);
    let text = fs::read_to_string(&trace).unwrap();
    let kills = text.lines().filter(|l| serde_json::from_str::<Value>(l).unwrap()["kind"] == "kill_report").count();
    assert_eq!(kills, 1);
    // Same seed, same bytes.
    assert_eq!(ok(&["sim", "run", scenario]), text);

    let broken = dir.path().join("broken.json");
    fs::write(&broken, r#"{"seed": 1, "relays": [{"name": "r1", "trust": ["nobody"]}]}"#).unwrap();
    assert_eq!(code(&["sim", "run", s(&broken)]), 1);
}

#[test]
fn bench_attach_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let (key, trust) = keyed(dir.path());
    let pkg = padding_package(dir.path(), &key);
    let out = ok(&["bench", "attach", s(&pkg), "--iters", "20", "--trust", s(&trust)]);
    let report: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["iterations"], 20);
    assert_eq!(report["warm"], true);
    assert!(report["median_us"].as_f64().unwrap() > 0.0);
    assert_eq!(code(&["bench", "attach", s(&pkg), "--iters", "0", "--trust", s(&trust)]), 2);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.fanp");
    assert_eq!(code(&["package", "--code", PADDING_SRC, "--name", "x", "-o", s(&out)]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert!(!out.exists());
}
