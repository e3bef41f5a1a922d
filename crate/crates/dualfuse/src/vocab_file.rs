//! Vocabulary file: one token per line, index = line number - 1.

use std::path::Path;

use dualfuse_core::vocab::Vocab;

use crate::error::{FormatError, Result};
use crate::fsutil::write_atomic;

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut s = vocab.tokens().join("\n");
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    let tokens: Vec<String> = text.lines().map(str::to_string).collect();
    Vocab::from_tokens(tokens).map_err(|e| FormatError::malformed(path, "vocabulary", e.to_string()))
}
