//! Waveforms, the log-Mel frontend and the synthetic token renderer.

pub mod fft;
pub mod mel;
pub mod synth;

use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Precondition(alloc::format!("sample rate {sample_rate}, expected {SAMPLE_RATE}")));
        }
        if samples.is_empty() {
            return Err(Error::Length { op: "waveform", got: 0, need: 1 });
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, k: f32) -> Self {
        Self { samples: self.samples.iter().map(|s| s * k).collect(), sample_rate: self.sample_rate }
    }
}

pub use mel::{log_mel, LogMel, MelSpectrogram};
pub use synth::{synth_utterance, ToneSpec, Voice, TOKEN_SAMPLES};
