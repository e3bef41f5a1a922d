//! 16-bit PCM mono WAV at 16 kHz.

use std::path::Path;

use dualfuse_core::audio::{Waveform, SAMPLE_RATE};

use crate::error::{FormatError, Result};

fn spec() -> hound::WavSpec {
    hound::WavSpec { channels: 1, sample_rate: SAMPLE_RATE, bits_per_sample: 16, sample_format: hound::SampleFormat::Int }
}

/// Nearest 16-bit code of a sample in [-1, 1].
pub fn quantize(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16
}

pub fn dequantize(q: i16) -> f32 {
    q as f32 / i16::MAX as f32
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let err = |e: hound::Error| FormatError::malformed(path, "wav", e.to_string());
    let mut out = hound::WavWriter::create(path, spec()).map_err(err)?;
    for &s in &w.samples {
        out.write_sample(quantize(s)).map_err(err)?;
    }
    out.finalize().map_err(err)
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let err = |e: hound::Error| FormatError::malformed(path, "wav", e.to_string());
    let mut r = hound::WavReader::open(path).map_err(err)?;
    let s = r.spec();
    if s != spec() {
        return Err(FormatError::malformed(
            path,
            "wav",
            format!(
                "need 16-bit PCM mono at {SAMPLE_RATE} Hz, got {} bit {} channel(s) at {} Hz",
                s.bits_per_sample, s.channels, s.sample_rate
            ),
        ));
    }
    let samples = r.samples::<i16>().map(|x| x.map(dequantize)).collect::<std::result::Result<Vec<_>, _>>().map_err(err)?;
    Ok(Waveform::new(samples, SAMPLE_RATE)?)
}
