// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use attnscope_core::store::ArtifactStore;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_attnscope"));
    c.env("RUST_LOG", "warn");
    c
}

fn toy() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/toy.jsonl")
}

fn precompute(out: &Path, limit: usize) -> std::process::Output {
    bin()
        .args([
            "precompute",
            "--model",
            "tiny-seq2seq",
            "--field-map",
            "input=document,reference=summary,id=id",
        ])
        .arg("--dataset")
        .arg(toy())
        .arg("--output")
        .arg(out)
        .args(["--attn-steps", "3", "--limit", &limit.to_string()])
        .output()
        .unwrap()
}

fn http_get(port: u16, path: &str) -> (u16, String) {
    let mut s = TcpStream::connect(("127.0.0.1", port)).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut text = String::new();
    s.read_to_string(&mut text).unwrap();
    let status = text[9..12].parse().unwrap();
    let body = text
        .split_once("\r\n\r\n")
        .map(|(_, b)| b.to_string())
        .unwrap_or_default();
    (status, body)
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let out = bin().args(["precompute", "--model", "tiny-seq2seq"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--dataset"));
}

#[test]
fn unknown_device_is_a_usage_error() {
    let out = bin()
        .args(["--device", "cuda", "serve", "--cache-dir", "x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn precompute_then_serve() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let out = precompute(&cache, 10);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("progress lines are JSON"))
        .collect();
    let done = lines.last().unwrap();
    assert_eq!(done["event"], "done");
    assert_eq!(done["examples"], 10);
    let store = ArtifactStore::open(&cache).unwrap();
    assert_eq!(store.load_corpus().unwrap().len(), 10);
    assert!(store.manifest().complete);
    assert_eq!(store.manifest().params.attn_steps, 3);

    // Identical flags: nothing runs and the manifest is untouched.
    let manifest = std::fs::read(cache.join("manifest.json")).unwrap();
    let again = precompute(&cache, 10);
    assert!(again.status.success());
    let last: serde_json::Value =
        serde_json::from_str(String::from_utf8(again.stdout).unwrap().lines().last().unwrap()).unwrap();
    assert_eq!(last["ran"], serde_json::json!([]));
    assert_eq!(std::fs::read(cache.join("manifest.json")).unwrap(), manifest);

    // Serve on a free port and list the corpus.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = bin()
        .args(["serve", "--port", &port.to_string()])
        .arg("--cache-dir")
        .arg(&cache)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    assert!(line.contains(&format!("http://127.0.0.1:{port}/")), "{line}");
    let (status, body) = http_get(port, "/api/examples");
    let _ = child.kill();
    let _ = child.wait();
    assert_eq!(status, 200);
    let v: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 10);
}

#[test]
fn serve_refuses_incomplete_cache_and_busy_port() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    assert!(precompute(&cache, 4).status.success());

    let blocker = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = blocker.local_addr().unwrap().port();
    let start = Instant::now();
    let out = bin()
        .args(["serve", "--port", &port.to_string()])
        .arg("--cache-dir")
        .arg(&cache)
        .output()
        .unwrap();
    assert!(start.elapsed() < Duration::from_secs(30));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&format!("port {port} is already in use")));

    let mut store = ArtifactStore::open(&cache).unwrap();
    let names: Vec<String> = store
        .manifest()
        .arrays
        .keys()
        .filter(|k| k.starts_with("head_importance"))
        .cloned()
        .collect();
    for n in names {
        store.remove(&n).unwrap();
    }
    let out = bin()
        .args(["serve", "--port", "0"])
        .arg("--cache-dir")
        .arg(&cache)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("incomplete") && err.contains("head_importance"), "{err}");
}
