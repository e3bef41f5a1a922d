//! 80-channel log-magnitude Mel spectrogram (25 ms Hann window, 10 ms hop
//! at 16 kHz, HTK Mel scale over 0-8000 Hz).

use alloc::vec;
use alloc::vec::Vec;

use crate::audio::fft::FftPlan;
use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const N_FFT: usize = 400;
pub const HOP: usize = 160;
pub const N_MELS: usize = 80;
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Triangular filters `[n_mels x (n_fft/2 + 1)]` with unit peak.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    weights: Vec<f64>,
    n_mels: usize,
    n_bins: usize,
    edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize, f_min: f64, f_max: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * sample_rate as f64 / n_fft as f64;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        Self { weights, n_mels, n_bins, edges_hz }
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    /// `n_mels + 2` band edges in Hz; filter `m` peaks at `edges[m + 1]`.
    pub fn edges_hz(&self) -> &[f64] {
        &self.edges_hz
    }

    pub fn filter(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn apply(&self, magnitudes: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.filter(m).iter().zip(magnitudes).map(|(w, x)| w * x).sum();
        }
    }
}

/// Log-Mel frames `[T x 80]`, `T = floor((N - 400) / 160) + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor<f32>,
    pub frame_shift_ms: f32,
    pub frame_length_ms: f32,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

pub fn num_frames(n_samples: usize) -> usize {
    if n_samples < N_FFT {
        0
    } else {
        (n_samples - N_FFT) / HOP + 1
    }
}

/// Reusable extractor holding the FFT plan, window and filterbank.
#[derive(Clone, Debug)]
pub struct LogMel {
    plan: FftPlan,
    window: Vec<f64>,
    bank: MelFilterbank,
}

impl Default for LogMel {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMel {
    pub fn new() -> Self {
        // periodic Hann
        let window = (0..N_FFT)
            .map(|i| 0.5 - 0.5 * libm::cos(core::f64::consts::TAU * i as f64 / N_FFT as f64))
            .collect();
        Self {
            plan: FftPlan::new(N_FFT),
            window,
            bank: MelFilterbank::new(super::SAMPLE_RATE, N_FFT, N_MELS, 0.0, 8000.0),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Linear Mel energies (before the log) for each frame.
    pub fn mel_energies(&self, w: &Waveform) -> Result<Vec<Vec<f64>>> {
        let n = w.samples.len();
        if n < N_FFT {
            return Err(Error::Length { op: "log_mel", got: n, need: N_FFT });
        }
        let t = num_frames(n);
        let mut frame = vec![0.0f64; N_FFT];
        let mut mags = vec![0.0f64; N_FFT / 2 + 1];
        let mut out = Vec::with_capacity(t);
        for i in 0..t {
            let s = &w.samples[i * HOP..i * HOP + N_FFT];
            for ((f, &x), &win) in frame.iter_mut().zip(s).zip(&self.window) {
                *f = x as f64 * win;
            }
            let spec = self.plan.forward_real(&frame);
            for (m, c) in mags.iter_mut().zip(&spec) {
                *m = c.norm();
            }
            let mut row = vec![0.0; N_MELS];
            self.bank.apply(&mags, &mut row);
            out.push(row);
        }
        Ok(out)
    }

    pub fn compute(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let energies = self.mel_energies(w)?;
        let t = energies.len();
        let mut data = Vec::with_capacity(t * N_MELS);
        for row in energies {
            data.extend(row.iter().map(|&e| libm::log10(e.max(LOG_FLOOR)) as f32));
        }
        let frames = Tensor::new(&[t, N_MELS], data)?;
        frames.check_finite("log_mel")?;
        Ok(MelSpectrogram {
            frames,
            frame_shift_ms: 1000.0 * HOP as f32 / super::SAMPLE_RATE as f32,
            frame_length_ms: 1000.0 * N_FFT as f32 / super::SAMPLE_RATE as f32,
        })
    }
}

/// Log-Mel spectrogram with the standard frontend constants.
pub fn log_mel(w: &Waveform) -> Result<MelSpectrogram> {
    LogMel::new().compute(w)
}
