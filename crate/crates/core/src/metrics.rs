//! Training records and throughput summaries.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::TrainStats;

/// Appends one JSON document per line.
#[derive(Debug)]
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonlWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// One collect-and-learn iteration across all replicas.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub update: u64,
    /// Fresh steps collected by all replicas in this iteration.
    pub steps: usize,
    pub cumulative_steps: u64,
    /// Clock time at which the last replica closed its rollout.
    pub close_time: f64,
    /// Seconds since the previous iteration's close.
    pub interval: f64,
    pub sps: f64,
    /// Longest replica collection time.
    pub collect_time: f64,
    pub learn_time: f64,
    pub episodes: usize,
    pub mean_return: Option<f64>,
    pub stale_steps: usize,
    pub preempted_replicas: usize,
    /// Step target used to preempt this iteration's rollouts, if any.
    pub preempt_target: Option<usize>,
    /// Largest parameter difference between replicas after the update.
    pub max_divergence: f64,
}

/// Per-replica update record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub replica: usize,
    pub cumulative_steps: u64,
    pub mean_return: Option<f64>,
    #[serde(flatten)]
    pub stats: TrainStats,
}

/// Mean and best-window steps per second.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub mean_sps: f64,
    pub max_sps: f64,
    pub iterations: usize,
    pub steps: u64,
    pub seconds: f64,
}

impl Throughput {
    /// Mean over all iterations after the first `warmup`, and the maximum
    /// over windows of `window` consecutive iterations.
    pub fn from_iterations(records: &[IterationRecord], warmup: usize, window: usize) -> Self {
        let steady = records.get(warmup..).unwrap_or(&[]);
        let steps: u64 = steady.iter().map(|r| r.steps as u64).sum();
        let seconds: f64 = steady.iter().map(|r| r.interval).sum();
        let window = window.max(1);
        let max_sps = steady
            .windows(window.min(steady.len()).max(1))
            .map(|w| {
                let s: usize = w.iter().map(|r| r.steps).sum();
                let t: f64 = w.iter().map(|r| r.interval).sum();
                if t > 0.0 {
                    s as f64 / t
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max);
        Throughput {
            mean_sps: if seconds > 0.0 { steps as f64 / seconds } else { 0.0 },
            max_sps,
            iterations: steady.len(),
            steps,
            seconds,
        }
    }

    /// Mean over several runs, weighting each by its duration.
    pub fn pooled(runs: &[Throughput]) -> Self {
        let steps: u64 = runs.iter().map(|r| r.steps).sum();
        let seconds: f64 = runs.iter().map(|r| r.seconds).sum();
        Throughput {
            mean_sps: if seconds > 0.0 { steps as f64 / seconds } else { 0.0 },
            max_sps: runs.iter().map(|r| r.max_sps).fold(0.0, f64::max),
            iterations: runs.iter().map(|r| r.iterations).sum(),
            steps,
            seconds,
        }
    }

    pub fn mean_over_max(&self) -> f64 {
        if self.max_sps > 0.0 {
            self.mean_sps / self.max_sps
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(steps: usize, interval: f64) -> IterationRecord {
        IterationRecord {
            steps,
            interval,
            ..Default::default()
        }
    }

    #[test]
    fn mean_is_total_steps_over_total_time() {
        let records = vec![rec(100, 10.0), rec(100, 1.0), rec(100, 2.0), rec(100, 1.0)];
        let t = Throughput::from_iterations(&records, 1, 1);
        assert_eq!(t.iterations, 3);
        assert!((t.mean_sps - 300.0 / 4.0).abs() < 1e-12);
        assert!((t.max_sps - 100.0).abs() < 1e-12);
        let t2 = Throughput::from_iterations(&records, 1, 2);
        assert!((t2.max_sps - 200.0 / 3.0).abs() < 1e-12);
        assert!(t.mean_over_max() < 1.0);
    }

    #[test]
    fn jsonl_lines_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let mut w = JsonlWriter::create(&path).unwrap();
        w.write(&rec(3, 1.5)).unwrap();
        w.write(&rec(4, 2.5)).unwrap();
        w.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back: Vec<IterationRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, vec![rec(3, 1.5), rec(4, 2.5)]);
    }
}
