//! Quality and efficiency instrumentation: bits-per-byte, task metric,
//! memory-size statistics, and wall-clock per batch. GPU-memory columns are
//! replaced by live-entry counts since everything here runs on CPU; the
//! entry count is the quantity the span penalty actually governs.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One emitted metrics row. CSV columns appear exactly in field order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMetrics {
    pub step: usize,
    /// Mean task cross-entropy, nats per scored token.
    pub task_loss: f64,
    /// Span penalty at the last training step (already alpha-scaled).
    pub span_loss: f64,
    /// Bits per byte, char-level LM only.
    pub bpb: Option<f64>,
    /// Task metric: exact-match accuracy (copy) or per-token accuracy.
    pub metric: f64,
    /// Mean live-memory count per query, across layers and blocks.
    pub avg_mem: f64,
    /// Largest bank size observed (entries).
    pub peak_mem: usize,
    /// Median wall-clock per training step in the last window.
    pub ms_per_batch: f64,
    /// Mean freshly-predicted span, timesteps.
    pub avg_span: f64,
    pub lr: f64,
}

pub const CSV_HEADER: &str =
    "step,task_loss,span_loss,bpb,metric,avg_mem,peak_mem,ms_per_batch,avg_span,lr";

impl RunMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.task_loss,
            self.span_loss,
            self.bpb.map_or(String::new(), |v| v.to_string()),
            self.metric,
            self.avg_mem,
            self.peak_mem,
            self.ms_per_batch,
            self.avg_span,
            self.lr
        )
    }
}

/// Append rows to a CSV file, writing the header on creation.
pub struct CsvWriter {
    file: std::fs::File,
}

impl CsvWriter {
    pub fn create(path: &std::path::Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{CSV_HEADER}")?;
        Ok(CsvWriter { file })
    }

    /// Reopen an existing file for appending (resumed runs).
    pub fn append_to(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(CsvWriter { file })
    }

    pub fn append(&mut self, row: &RunMetrics) -> Result<()> {
        writeln!(self.file, "{}", row.csv_row())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Cross-entropy in nats per token converted to bits per byte.
pub fn bits_per_byte(nats_per_token: f64) -> f64 {
    nats_per_token / std::f64::consts::LN_2
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Timing summary over repeated runs of a thunk.
#[derive(Clone, Debug)]
pub struct BatchTiming {
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
    pub spread_ms: f64,
}

/// Wall-clock one thunk `k` times and report the median with its spread.
pub fn timed_batch<F: FnMut()>(mut thunk: F, k: usize) -> BatchTiming {
    assert!(k > 0);
    let mut samples = Vec::with_capacity(k);
    for _ in 0..k {
        let t0 = Instant::now();
        thunk();
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let med = median(&samples);
    let spread =
        samples.iter().map(|s| (s - med).abs()).fold(0.0f64, f64::max);
    BatchTiming { median_ms: med, samples_ms: samples, spread_ms: spread }
}
