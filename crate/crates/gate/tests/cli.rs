use std::path::Path;
use std::process::{Child, Command, Output};
use std::thread;
use std::time::{Duration, Instant};

use sieve_server::client::Client;
use sieve_server::wire::{parse_stream, StreamLine};

fn sieve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sieve")).args(args).output().expect("sieve runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn corpus_gen_writes_devices_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let out = sieve(&["--seed", "3", "--out", path(dir.path()), "corpus", "gen", "--devices", "4", "--photos", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let truth = std::fs::read_to_string(dir.path().join("truth.tsv")).unwrap();
    assert_eq!(truth.lines().count(), 1 + 4 * 5);
    let devices = std::fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().file_type().unwrap().is_dir()).count();
    assert_eq!(devices, 4);
}

#[test]
fn experiment_reports_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let out = sieve(&["--seed", "5", "--out", path(dir.path()), "experiment", "partition", "--photos", "30", "--window-from", "10"]);
        assert!(out.status.code().is_some_and(|c| c <= 1), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |d: &Path| std::fs::read(d.join("partition.ndjson")).unwrap();
    let first = read(a.path());
    assert_eq!(first, read(b.path()));
    let last = String::from_utf8(first).unwrap().lines().last().unwrap().to_string();
    let summary: serde_json::Value = serde_json::from_str(&last).unwrap();
    assert_eq!(summary["summary"]["provenance"]["seed"], 5);
}

#[test]
fn bad_arguments_exit_with_two() {
    let out = sieve(&["query", "submit", "--server", "http://127.0.0.1:1", "--template", "no_such_query", "--budget", "50"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn serve_and_submit_over_http() {
    let corpus = tempfile::tempdir().unwrap();
    let out = sieve(&["--out", path(corpus.path()), "corpus", "gen", "--devices", "3", "--photos", "6"]);
    assert!(out.status.success());
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let server = Killed(
        Command::new(env!("CARGO_BIN_EXE_sieve"))
            .args(["serve", "--addr", &addr, "--corpus", path(corpus.path())])
            .stderr(std::process::Stdio::null())
            .spawn()
            .unwrap(),
    );
    let url = format!("http://{addr}");
    let client = Client::new(&url).unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    while client.devices().map_or(true, |d| d.len() < 3) {
        assert!(Instant::now() < deadline, "server never came up");
        thread::sleep(Duration::from_millis(50));
    }
    let out = sieve(&["query", "submit", "--server", &url, "--template", "all_accept", "--budget", "60", "--timeout-s", "30"]);
    drop(server);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = parse_stream(&String::from_utf8(out.stdout).unwrap()).unwrap();
    let results = lines.iter().filter(|l| matches!(l, StreamLine::Result(_))).count() as u64;
    let done = lines.iter().find_map(|l| if let StreamLine::Completion(c) = l { Some(c.clone()) } else { None }).expect("completion line");
    assert!(results > 0);
    assert_eq!(done.results, results);
    assert!(done.charges.total <= 60);
}
