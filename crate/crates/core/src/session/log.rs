//! Append-only newline-delimited JSON session log and deterministic replay.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::source::FrameOrigin;
use super::{train_on_selection, SessionConfig};
use crate::beamform::Method;
use crate::error::{Error, Result};
use crate::geometry::delay_compensate;
use crate::neural::Model;

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundTiming {
    /// Delay compensation, all candidate beamformers and rendering.
    pub render_s: f64,
    /// Training step(s); 0 when skipped.
    pub train_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub round_id: u64,
    pub frame_origin: FrameOrigin,
    pub frame_digest: String,
    pub permutation_seed: u64,
    /// Candidate ids in display order.
    pub shown: Vec<String>,
    pub selected_id: String,
    pub selected_method: Method,
    pub loss: f64,
    pub step_skipped: bool,
    pub model_step: u64,
    pub checkpoint_id: String,
    pub timing: RoundTiming,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEntry {
    Header { version: u32, config: SessionConfig },
    Round(SessionRecord),
}

/// Appends one JSON line per entry and flushes after each.
#[derive(Debug)]
pub struct LogWriter {
    file: File,
}

impl LogWriter {
    /// Creates (truncating) `path` and writes the header.
    pub fn create(path: &Path, config: &SessionConfig) -> Result<Self> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        let mut w = LogWriter { file };
        w.append(&LogEntry::Header { version: LOG_VERSION, config: config.clone() })?;
        Ok(w)
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<()> {
        let mut line = serde_json::to_string(entry).map_err(|e| Error::Format(format!("log entry: {e}")))?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Parsed log: header configuration plus round records in order.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub config: SessionConfig,
    pub records: Vec<SessionRecord>,
}

impl SessionLog {
    pub fn read(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut config = None;
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: LogEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("log line {}: {e}", n + 1)))?;
            match entry {
                LogEntry::Header { version, config: c } => {
                    if config.is_some() {
                        return Err(Error::Format(format!("log line {}: second header", n + 1)));
                    }
                    if version != LOG_VERSION {
                        return Err(Error::Format(format!("unsupported log version {version}")));
                    }
                    config = Some(c);
                }
                LogEntry::Round(r) => {
                    if config.is_none() {
                        return Err(Error::Format("log does not start with a header".into()));
                    }
                    records.push(r);
                }
            }
        }
        let config = config.ok_or_else(|| Error::Format("log has no header".into()))?;
        Ok(SessionLog { config, records })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub rounds: usize,
    pub final_checkpoint_id: String,
    pub recorded_checkpoint_id: Option<String>,
    /// Rounds whose reproduced checkpoint differs from the recorded one.
    pub mismatched_rounds: Vec<u64>,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.mismatched_rounds.is_empty() && self.recorded_checkpoint_id.as_ref() == Some(&self.final_checkpoint_id)
    }
}

/// Re-runs the recorded selections from a fresh model and compares checkpoints.
pub fn replay(log: &SessionLog) -> Result<ReplayReport> {
    let config = &log.config;
    config.validate()?;
    let grid = config.grid.build(&config.probe)?;
    let mut model = Model::<f64>::new(config.unet, config.train)?;
    let mut mismatched = Vec::new();
    for r in &log.records {
        if r.selected_method != Method::Model {
            let frame = r.frame_origin.load(&grid)?;
            if frame.digest() != r.frame_digest {
                return Err(Error::Integrity(format!("round {}: frame digest differs from the log", r.round_id)));
            }
            let t = delay_compensate(&frame, &grid)?;
            let data = config.beamformers.run(r.selected_method, &t)?;
            train_on_selection(&mut model, &t, &data, config)?;
        }
        if model.checkpoint_id() != r.checkpoint_id {
            mismatched.push(r.round_id);
        }
    }
    Ok(ReplayReport {
        rounds: log.records.len(),
        final_checkpoint_id: model.checkpoint_id(),
        recorded_checkpoint_id: log.records.last().map(|r| r.checkpoint_id.clone()),
        mismatched_rounds: mismatched,
    })
}
