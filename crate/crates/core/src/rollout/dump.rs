//! JSONL rollout trace: one entry per line, in the order the buffer saw
//! them. Replaying the entries through a fresh buffer reproduces every view.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EnvStepRecord, RolloutBuffer, RolloutMode, RolloutView};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DumpEntry {
    Header {
        mode: RolloutMode,
        num_envs: usize,
        steps_per_env: usize,
    },
    Begin {
        rollout: u64,
    },
    Step {
        rollout: u64,
        #[serde(flatten)]
        record: EnvStepRecord,
    },
    Close {
        rollout: u64,
        bootstraps: Vec<Option<f64>>,
    },
}

#[derive(Debug)]
pub struct DumpWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl DumpWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(DumpWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, entry: &DumpEntry) -> Result<()> {
        serde_json::to_writer(&mut self.out, entry)?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_dump(path: &Path) -> Result<Vec<DumpEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line)?);
    }
    Ok(entries)
}

/// Feeds a trace through a fresh buffer and returns every closed view
/// (before any stale backfill).
pub fn replay(entries: &[DumpEntry]) -> Result<Vec<RolloutView>> {
    let mut views = Vec::new();
    let mut buffer: Option<RolloutBuffer> = None;
    for entry in entries {
        match entry {
            DumpEntry::Header {
                mode,
                num_envs,
                steps_per_env,
            } => buffer = Some(RolloutBuffer::new(*mode, *num_envs, *steps_per_env)),
            other => {
                let buf = buffer
                    .as_mut()
                    .ok_or_else(|| Error::Protocol("trace does not start with a header".into()))?;
                match other {
                    DumpEntry::Begin { .. } => {
                        buf.begin_rollout()?;
                    }
                    DumpEntry::Step { record, .. } => {
                        buf.append_step(record.clone())?;
                    }
                    DumpEntry::Close { bootstraps, .. } => {
                        buf.preempt();
                        views.push(buf.close_rollout(bootstraps)?);
                    }
                    DumpEntry::Header { .. } => unreachable!(),
                }
            }
        }
    }
    Ok(views)
}
