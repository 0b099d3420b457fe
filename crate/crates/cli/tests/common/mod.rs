#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn slicewise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slicewise"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Runs the binary and panics with its stderr unless it exits 0.
pub fn ok(args: &[&str]) -> Output {
    let out = slicewise(args);
    assert!(out.status.success(), "{args:?} failed: {}", stderr(&out));
    out
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

pub fn synth(root: &Path, cases: usize, features: bool) {
    let n = cases.to_string();
    let mut args = vec!["synth", "--out", root.to_str().unwrap(), "--cases", &n];
    if !features {
        args.push("--no-features");
    }
    ok(&args);
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
