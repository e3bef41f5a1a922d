//! Tab-separated utterance manifest.
//!
//! Columns: id, language, split, duration, audio path, transcript, target
//! language, translation. The last two are empty for ASR-only records.

use std::path::{Path, PathBuf};

use dualfuse_core::corpus::Split;

use crate::error::{FormatError, Result};

pub const HEADER: [&str; 8] = ["id", "language", "split", "duration", "audio", "transcript", "tgt_language", "translation"];

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub language: String,
    pub split: Split,
    pub duration: f64,
    /// Relative to the manifest's directory unless absolute.
    pub audio: PathBuf,
    pub transcript: String,
    pub tgt_language: Option<String>,
    pub translation: Option<String>,
}

fn check_field(path: &Path, line: usize, v: &str) -> Result<()> {
    if v.contains(['\t', '\n', '\r']) {
        return Err(FormatError::malformed(path, "manifest", format!("row {line}: field {v:?} holds a tab or newline")));
    }
    Ok(())
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let csv_err = |e: csv::Error| FormatError::malformed(path, "manifest", e.to_string());
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .quote_style(csv::QuoteStyle::Never)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(HEADER).map_err(csv_err)?;
    for (i, r) in rows.iter().enumerate() {
        let audio = r.audio.to_string_lossy();
        let duration = format!("{:.4}", r.duration);
        let fields = [
            r.id.as_str(),
            r.language.as_str(),
            r.split.as_str(),
            duration.as_str(),
            audio.as_ref(),
            r.transcript.as_str(),
            r.tgt_language.as_deref().unwrap_or(""),
            r.translation.as_deref().unwrap_or(""),
        ];
        for f in fields {
            check_field(path, i + 2, f)?;
        }
        w.write_record(fields).map_err(csv_err)?;
    }
    w.flush().map_err(|e| FormatError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let csv_err = |e: csv::Error| FormatError::malformed(path, "manifest", e.to_string());
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(FormatError::malformed(path, "manifest", format!("header {:?}, expected {HEADER:?}", header)));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let bad = |d: String| FormatError::malformed(path, "manifest", format!("row {line}: {d}"));
        let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
        let duration: f64 = rec[3].parse().map_err(|_| bad(format!("duration {:?}", &rec[3])))?;
        let split = Split::parse(&rec[2]).map_err(|e| bad(e.to_string()))?;
        let (tgt, tr) = (opt(&rec[6]), opt(&rec[7]));
        if tgt.is_some() != tr.is_some() {
            return Err(bad("target language and translation must both be present or both empty".into()));
        }
        rows.push(ManifestRow {
            id: rec[0].to_string(),
            language: rec[1].to_string(),
            split,
            duration,
            audio: PathBuf::from(&rec[4]),
            transcript: rec[5].to_string(),
            tgt_language: tgt,
            translation: tr,
        });
    }
    Ok(rows)
}
