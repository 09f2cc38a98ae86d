//! Experiment reports: one JSON object per line for the table rows, then a
//! final `{"summary": ...}` line.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

use sieve_core::config::Config;

/// Everything needed to rerun an experiment and get the same bytes back.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub experiment: String,
    pub seed: u64,
    pub config: Config,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub parameters: serde_json::Value,
}

impl Provenance {
    pub fn new(experiment: &str, seed: u64, config: &Config, parameters: serde_json::Value) -> Self {
        Provenance {
            tool: "sieve",
            version: env!("CARGO_PKG_VERSION"),
            experiment: experiment.to_string(),
            seed,
            config: config.clone(),
            parameters,
        }
    }
}

#[derive(Serialize)]
struct SummaryLine<'a, S> {
    summary: &'a S,
}

pub fn render<R: Serialize, S: Serialize>(rows: &[R], summary: &S) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("report rows serialize"));
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(&SummaryLine { summary }).expect("report summary serializes"));
    out.push('\n');
    out
}

/// Writes `<dir>/<name>.ndjson`, or to stdout without a directory.
pub fn emit<R: Serialize, S: Serialize>(dir: Option<&Path>, name: &str, rows: &[R], summary: &S) -> io::Result<()> {
    let text = render(rows, summary);
    match dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(format!("{name}.ndjson")), text)
        }
        None => io::stdout().lock().write_all(text.as_bytes()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_then_summary() {
        let text = render(&[serde_json::json!({"a": 1}), serde_json::json!({"a": 2})], &serde_json::json!({"n": 2}));
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2]["summary"]["n"], 2);
    }

    #[test]
    fn provenance_carries_the_config() {
        let p = Provenance::new("x", 4, &Config::default(), serde_json::Value::Null);
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["config"]["cost"]["per_result"], 10);
        assert_eq!(v["config"]["wifi"]["rtt_ms"], 66.0);
        assert!(v.get("parameters").is_none());
    }
}
