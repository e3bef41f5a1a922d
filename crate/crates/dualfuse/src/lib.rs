//! File formats, configuration, the training pipeline and the command-line
//! tools around `dualfuse-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod fsutil;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod vocab_file;
pub mod wav;

pub use error::{FormatError, Result};
