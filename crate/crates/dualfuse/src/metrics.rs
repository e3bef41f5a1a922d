//! Line-delimited JSON metric log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use dualfuse_core::training::{DevRecord, StepRecord};
use serde::{Deserialize, Serialize};

use crate::error::{FormatError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        step: u64,
        lr: f64,
        l_dec: f64,
        l_ctc: f64,
        l_lid: f64,
        l_all: f64,
        lid_acc: Option<f64>,
        /// w′ per language.
        gates: BTreeMap<String, f64>,
        grad_norm: Option<f64>,
        skipped: bool,
    },
    Dev {
        step: u64,
        l_dec: f64,
        l_ctc: f64,
        l_lid: f64,
        l_all: f64,
        lid_acc: Option<f64>,
        kept: bool,
    },
}

impl LogRecord {
    pub fn step(&self) -> u64 {
        match self {
            LogRecord::Step { step, .. } | LogRecord::Dev { step, .. } => *step,
        }
    }

    pub fn from_step(r: &StepRecord, languages: &[String]) -> Self {
        LogRecord::Step {
            step: r.step,
            lr: r.lr,
            l_dec: r.losses.l_dec,
            l_ctc: r.losses.l_ctc,
            l_lid: r.losses.l_lid,
            l_all: r.losses.l_all,
            lid_acc: r.lid_accuracy,
            gates: languages.iter().cloned().zip(r.gates.iter().copied()).collect(),
            grad_norm: r.grad_norm.is_finite().then_some(r.grad_norm),
            skipped: r.skipped,
        }
    }

    pub fn from_dev(r: &DevRecord, kept: bool) -> Self {
        LogRecord::Dev {
            step: r.step,
            l_dec: r.losses.l_dec,
            l_ctc: r.losses.l_ctc,
            l_lid: r.losses.l_lid,
            l_all: r.losses.l_all,
            lid_acc: r.lid_accuracy,
            kept,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log records serialize")
    }
}

pub struct MetricLog {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl MetricLog {
    /// Open for appending, first dropping every record after `keep_through`
    /// (all of them when `None`).
    pub fn open(path: &Path, keep_through: Option<u64>) -> Result<Self> {
        let kept: Vec<String> = match keep_through {
            Some(s) if path.exists() => {
                let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
                let records = parse_log(&text, path)?;
                text.lines()
                    .filter(|l| !l.trim().is_empty())
                    .zip(records)
                    .filter(|(_, r)| r.step() <= s)
                    .map(|(l, _)| l.to_string())
                    .collect()
            }
            _ => Vec::new(),
        };
        let mut text = kept.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| FormatError::io(path, e))?;
        let file = std::fs::OpenOptions::new().append(true).open(path).map_err(|e| FormatError::io(path, e))?;
        Ok(Self { file, path: path.to_path_buf() })
    }

    pub fn append(&mut self, r: &LogRecord) -> Result<()> {
        writeln!(self.file, "{}", r.to_line()).map_err(|e| FormatError::io(&self.path, e))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    parse_log(&text, path)
}

fn parse_log(text: &str, path: &Path) -> Result<Vec<LogRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| FormatError::malformed(path, "metric log", format!("line {}: {e}", i + 1)))
        })
        .collect()
}
