use std::io::Write;

use serde::{Deserialize, Serialize};

use super::tasks::{mean, std_dev};
use crate::error::{HolaError, Result};
use crate::model::TokenId;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRow {
    pub task_id: String,
    pub prompt: String,
    pub expected: String,
    pub output: String,
    pub tokens: Vec<TokenId>,
    pub correct: bool,
    pub latency_micros: u64,
    pub peak_bytes: u64,
    pub verifier_calls: usize,
    pub draft_calls: usize,
    pub emitted: usize,
    pub retrieved: Vec<String>,
    /// `C(q)`, absent when retrieval is disabled.
    pub complexity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregates {
    pub tasks: usize,
    pub accuracy_pct: f64,
    pub latency_mean_ms: f64,
    pub latency_std_ms: f64,
    pub latency_per_token_mean_ms: f64,
    pub peak_mem_mean_mb: f64,
    pub peak_mem_std_mb: f64,
    /// Resident model weights: packed when compressed, f32 otherwise.
    pub model_bytes: usize,
    pub total_tokens: usize,
    pub total_verifier_calls: usize,
    pub total_draft_calls: usize,
    pub acceptance_rate: f64,
    pub cost_draft_micros: f64,
    pub cost_verifier_micros: f64,
    pub modeled_speedup: f64,
    /// Set when tasks ran concurrently; latencies are then contended.
    pub contended: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub schema_version: u32,
    pub stages: Stages,
    pub rows: Vec<RunRow>,
    pub aggregates: Aggregates,
}

/// Which pipeline stages were active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stages {
    pub hsd: bool,
    pub rag: bool,
    pub lobi: bool,
}

const MB: f64 = 1024.0 * 1024.0;

/// Aggregates that depend only on the rows.
pub fn row_statistics(rows: &[RunRow]) -> (f64, f64, f64, f64, f64, f64) {
    let n = rows.len().max(1) as f64;
    let correct = rows.iter().filter(|r| r.correct).count() as f64;
    let lat: Vec<f64> = rows.iter().map(|r| r.latency_micros as f64 / 1000.0).collect();
    let per_token: Vec<f64> = rows
        .iter()
        .map(|r| r.latency_micros as f64 / 1000.0 / r.emitted.max(1) as f64)
        .collect();
    let mem: Vec<f64> = rows.iter().map(|r| r.peak_bytes as f64 / MB).collect();
    (
        100.0 * correct / n,
        mean(&lat),
        std_dev(&lat),
        mean(&per_token),
        mean(&mem),
        std_dev(&mem),
    )
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: BenchReport =
            serde_json::from_str(text).map_err(|e| HolaError::Format(format!("report: {e}")))?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(HolaError::VersionMismatch {
                expected: SCHEMA_VERSION,
                found: report.schema_version,
            });
        }
        Ok(report)
    }

    /// One line per run.
    pub fn write_rows_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| HolaError::Format(e.to_string());
        w.write_record([
            "task_id",
            "prompt",
            "expected",
            "output",
            "correct",
            "latency_micros",
            "peak_bytes",
            "verifier_calls",
            "draft_calls",
            "emitted",
            "retrieved",
            "complexity",
        ])
        .map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.task_id.clone(),
                r.prompt.clone(),
                r.expected.clone(),
                r.output.clone(),
                r.correct.to_string(),
                r.latency_micros.to_string(),
                r.peak_bytes.to_string(),
                r.verifier_calls.to_string(),
                r.draft_calls.to_string(),
                r.emitted.to_string(),
                r.retrieved.join(";"),
                r.complexity.map(|c| c.to_string()).unwrap_or_default(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| HolaError::Format(e.to_string()))
    }

    /// A single-row summary of the aggregates.
    pub fn write_summary_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.serialize(&self.aggregates)
            .map_err(|e| HolaError::Format(e.to_string()))?;
        w.flush().map_err(|e| HolaError::Format(e.to_string()))
    }
}
