//! Flat `key=value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dualfuse_core::connector::{BlankPlacement, ConnectorConfig, Variant};
use dualfuse_core::corpus::{CorpusSizes, Reordering};
use dualfuse_core::decoder::{DecoderConfig, LmPretrainOptions};
use dualfuse_core::encoders::{EncoderConfig, PretrainOptions};
use dualfuse_core::model::ModelConfig;
use dualfuse_core::rng;
use dualfuse_core::training::{TrainConfig, TrainSchedule};
use dualfuse_core::vocab::Task;

use crate::error::{FormatError, Result};

/// String form of a config value.
pub trait ConfigValue: Sized {
    fn render(&self) -> String;
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                <$t>::from_str(s).map_err(|e| e.to_string())
            }
        }
    )*};
}
from_str_value!(usize, u64, bool, String);

impl ConfigValue for f64 {
    fn render(&self) -> String {
        // shortest representation that parses back to the same value
        format!("{self:?}")
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: std::num::ParseFloatError| e.to_string())
    }
}

impl ConfigValue for PathBuf {
    fn render(&self) -> String {
        self.display().to_string()
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
}

macro_rules! enum_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn render(&self) -> String {
                self.as_str().to_string()
            }
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                <$t>::parse(s).map_err(|e| e.to_string())
            }
        }
    )*};
}
enum_value!(Variant, Task, Reordering, BlankPlacement);

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $key:ident : $t:ty = $default:expr ),* $(,)?) => {
        /// Every tunable of the pipeline.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $key: $t, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $key: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($key) ),*];

            /// Documentation line of each key.
            pub fn describe(key: &str) -> Option<&'static str> {
                match key {
                    $( stringify!($key) => Some(concat!($($doc),*)), )*
                    _ => None,
                }
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($key) => Some(self.$key.render()), )*
                    _ => None,
                }
            }

            /// Set one key from its text form. Unknown keys are rejected.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($key) => {
                        self.$key = <$t as ConfigValue>::parse_value(value)
                            .map_err(|e| FormatError::Config(format!("{key}={value}: {e}")))?;
                    } )*
                    _ => return Err(FormatError::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }
        }
    };
}

run_config! {
    /// Number of synthetic languages.
    languages: usize = 4,
    /// Training utterances, split across languages by their size ratios.
    train_utterances: usize = 2000,
    /// Dev utterances, balanced across languages.
    dev_utterances: usize = 200,
    /// Test utterances, balanced across languages.
    test_utterances: usize = 200,
    /// Word-order rule of the synthetic translation: none, swap-token-pairs, swap-word-pairs.
    reordering: Reordering = Reordering::SwapTokenPairs,
    /// Master seed; every other random stream is derived from it.
    seed: u64 = 1,

    /// Width of the spectral encoder.
    spectral_dim: usize = 64,
    spectral_layers: usize = 2,
    /// Width of the waveform encoder.
    waveform_dim: usize = 48,
    waveform_layers: usize = 2,
    encoder_heads: usize = 4,
    /// Channels of the waveform feature extractor.
    conv_channels: usize = 32,
    /// Longest spectral input in frames.
    encoder_max_frames: usize = 400,
    /// Pretraining updates per encoder; 0 keeps random frozen weights.
    encoder_steps: usize = 400,
    encoder_batch: usize = 4,
    encoder_lr: f64 = 2e-3,
    /// Probability of masking a frame span in waveform pretraining.
    mask_prob: f64 = 0.2,
    mask_span: usize = 2,

    decoder_dim: usize = 64,
    decoder_layers: usize = 3,
    decoder_heads: usize = 4,
    decoder_ff: usize = 256,
    /// Longest decoder sequence in positions.
    decoder_max_len: usize = 192,
    /// Language-model pretraining updates of the decoder.
    lm_steps: usize = 3000,
    lm_batch: usize = 8,
    lm_lr: f64 = 2e-3,
    /// Noise std of the synthetic speech rows used in decoder pretraining.
    lm_noise: f64 = 0.3,
    /// Train the decoder together with the connector.
    decoder_trainable: bool = false,

    /// Connector variant: full, no-ws, single, single-no-ctc.
    variant: Variant = Variant::Full,
    /// Shared hidden size of the adapters.
    hidden_dim: usize = 64,
    adapter_layers: usize = 2,
    adapter_heads: usize = 4,
    adapter_ff: usize = 128,
    /// Longest connector input in frames.
    connector_max_frames: usize = 400,
    /// Kernel of the stride-2 downsampling convolution.
    down_kernel: usize = 3,
    /// Blank-frame placement of the shorter stream: time-aligned or tail.
    placement: BlankPlacement = BlankPlacement::TimeAligned,
    /// Waveform weight when the weight selector is disabled.
    fixed_gate: f64 = 0.5,

    /// Task: asr, ast, ast-cot.
    task: Task = Task::Asr,
    /// Weight of the CTC loss.
    alpha: f64 = 0.1,
    /// Weight of the LID loss.
    beta: f64 = 0.05,
    /// Language rebalancing exponent.
    gamma: f64 = 0.5,
    /// Utterances per micro-batch.
    batch_size: usize = 4,
    /// Micro-batches per update.
    accumulation: usize = 1,
    peak_lr: f64 = 2e-3,
    warmup_steps: u64 = 300,
    total_steps: u64 = 3000,
    /// Steps during which the true language picks the gate.
    teacher_forcing_steps: u64 = 500,
    dev_every: u64 = 250,
    /// Dev utterances scored at each dev evaluation; 0 means all.
    dev_subset: usize = 0,
    /// Checkpoints kept and averaged at the end.
    keep_best: usize = 5,
    /// Global gradient-norm clip; 0 disables.
    clip_norm: f64 = 5.0,
    /// Abort after this many consecutive non-finite steps.
    max_consecutive_skips: usize = 50,

    /// Longest generated output in tokens.
    max_new_tokens: usize = 120,
    /// Utterances decoded by eval; 0 means all.
    eval_limit: usize = 0,

    /// Directory of the generated corpus.
    corpus_dir: PathBuf = PathBuf::from("data"),
    /// Directory for checkpoints, logs and reports.
    output_dir: PathBuf = PathBuf::from("runs"),
}

/// Random stream labels under the master seed.
pub mod streams {
    pub const CORPUS: u64 = 1;
    pub const ENCODER_INIT: u64 = 2;
    pub const ENCODER_TRAIN: u64 = 3;
    pub const DECODER_INIT: u64 = 4;
    pub const DECODER_TRAIN: u64 = 5;
    pub const MODEL_INIT: u64 = 6;
    pub const BATCHES: u64 = 7;
}

impl RunConfig {
    pub fn stream_seed(&self, stream: u64) -> u64 {
        rng::derive_seed(self.seed, stream)
    }

    /// Parse `key=value` lines over `self`. Blank lines and `#` comments
    /// are ignored; a key may appear once.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FormatError::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(FormatError::Config(format!("line {}: key {k:?} repeated", n + 1)));
            }
            self.set(k, v.trim()).map_err(|e| FormatError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).unwrap_or_default());
        }
        s
    }

    /// The defaults with a comment above each key.
    pub fn reference_text() -> String {
        let d = Self::default();
        let mut s = String::from("# dualfuse run configuration: every key with its default value\n");
        for k in Self::KEYS {
            let _ = writeln!(s, "\n# {}", Self::describe(k).unwrap_or("").trim());
            let _ = writeln!(s, "{k}={}", d.get(k).unwrap_or_default());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FormatError::Config(m));
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha={} must lie in [0, 1)", self.alpha));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad(format!("beta={} must be >= 0", self.beta));
        }
        if !(0.0..=1.0).contains(&self.fixed_gate) {
            return bad(format!("fixed_gate={} must lie in [0, 1]", self.fixed_gate));
        }
        for (k, v) in [
            ("batch_size", self.batch_size),
            ("accumulation", self.accumulation),
            ("keep_best", self.keep_best),
            ("dev_every", self.dev_every as usize),
            ("lm_batch", self.lm_batch),
            ("encoder_batch", self.encoder_batch),
            ("max_new_tokens", self.max_new_tokens),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn corpus_sizes(&self) -> CorpusSizes {
        CorpusSizes { train: self.train_utterances, dev: self.dev_utterances, test: self.test_utterances }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            spectral_dim: self.spectral_dim,
            spectral_layers: self.spectral_layers,
            waveform_dim: self.waveform_dim,
            waveform_layers: self.waveform_layers,
            heads: self.encoder_heads,
            conv_channels: self.conv_channels,
            max_frames: self.encoder_max_frames,
        }
    }

    pub fn encoder_pretrain(&self) -> PretrainOptions {
        PretrainOptions {
            steps: self.encoder_steps,
            batch: self.encoder_batch,
            lr: self.encoder_lr,
            mask_prob: self.mask_prob,
            mask_span: self.mask_span,
            seed: self.stream_seed(streams::ENCODER_TRAIN),
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            model_dim: self.decoder_dim,
            layers: self.decoder_layers,
            heads: self.decoder_heads,
            ff_dim: self.decoder_ff,
            max_len: self.decoder_max_len,
        }
    }

    pub fn lm_pretrain(&self) -> LmPretrainOptions {
        LmPretrainOptions {
            steps: self.lm_steps,
            batch: self.lm_batch,
            lr: self.lm_lr,
            noise: self.lm_noise,
            seed: self.stream_seed(streams::DECODER_TRAIN),
        }
    }

    pub fn connector_config(&self) -> ConnectorConfig {
        ConnectorConfig {
            variant: self.variant,
            hidden_dim: self.hidden_dim,
            adapter_layers: self.adapter_layers,
            heads: self.adapter_heads,
            ff_dim: self.adapter_ff,
            max_frames: self.connector_max_frames,
            down_kernel: self.down_kernel,
            placement: self.placement,
            fixed_gate: self.fixed_gate,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            connector: self.connector_config(),
            decoder: self.decoder_config(),
            spectral_dim: self.spectral_dim,
            waveform_dim: self.waveform_dim,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            batch_size: self.batch_size,
            schedule: TrainSchedule {
                peak_lr: self.peak_lr,
                warmup_steps: self.warmup_steps,
                total_steps: self.total_steps,
                accumulation: self.accumulation,
                seed: self.stream_seed(streams::BATCHES),
            },
            teacher_forcing_steps: self.teacher_forcing_steps,
            dev_every: self.dev_every,
            dev_utterances: self.dev_subset,
            keep_best: self.keep_best,
            clip_norm: self.clip_norm,
            max_consecutive_skips: self.max_consecutive_skips as u32,
        }
    }
}
