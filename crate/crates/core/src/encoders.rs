//! The two frozen speech encoders: a spectral encoder over log-mel frames
//! and a waveform encoder over raw samples, plus their stand-in pretraining.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::audio::mel::{HOP, N_FFT, N_MELS};
use crate::audio::{LogMel, MelSpectrogram, Waveform, SAMPLE_RATE, TOKEN_SAMPLES};
use crate::corpus::{acoustic_tokens, Corpus, Split, ALPHABET, WORD_BOUNDARY};
use crate::error::{dim_err, Error, Result};
use crate::nn::{Conv1d, Dense, GradBuffer, Graph, LayerNorm, NodeId, ParamStore, TransformerEncoderConfig, TransformerStack};
use crate::rng;
use crate::tensor::Tensor;
use crate::training::{Adam, AdamConfig};

/// Kernel = stride of each waveform conv layer; product is 320 samples.
pub const WAVEFORM_STRIDES: [usize; 4] = [5, 4, 4, 4];
pub const WAVEFORM_HOP: usize = 320;
/// Frame classes for spectral pretraining: every letter plus the boundary.
pub const FRAME_CLASSES: usize = ALPHABET.len() + 1;

// log-mel values span roughly [-10, 2]
const MEL_SHIFT: f32 = 4.0;
const MEL_SCALE: f32 = 0.25;
const WAVE_TARGET_SCALE: f32 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureSource {
    Spectral,
    Waveform,
}

/// Frozen encoder output with the timing needed for stream alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderFeatures {
    pub source: FeatureSource,
    pub frames: Tensor<f32>,
    /// frames per second
    pub frame_rate: f64,
    /// centre time of frame 0 in seconds
    pub offset: f64,
}

impl EncoderFeatures {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn center_time(&self, frame: usize) -> f64 {
        self.offset + frame as f64 / self.frame_rate
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub spectral_dim: usize,
    pub spectral_layers: usize,
    pub waveform_dim: usize,
    pub waveform_layers: usize,
    pub heads: usize,
    pub conv_channels: usize,
    /// Longest spectral input in frames.
    pub max_frames: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            spectral_dim: 64,
            spectral_layers: 2,
            waveform_dim: 48,
            waveform_layers: 2,
            heads: 4,
            conv_channels: 32,
            max_frames: 400,
        }
    }
}

/// Spectral-encoder frame index whose token occupies the frame centre.
pub fn frame_token(frame: usize) -> usize {
    (frame * HOP + N_FFT / 2) / TOKEN_SAMPLES
}

pub fn frame_class(c: char) -> Option<usize> {
    if c == WORD_BOUNDARY {
        Some(ALPHABET.len())
    } else {
        ALPHABET.iter().position(|&a| a == c)
    }
}

#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub cfg: EncoderConfig,
    pub store: ParamStore,
    /// Whether [`pretrain_encoders`] has been run on these weights.
    pub pretrained: bool,
    mel: LogMel,
    lift: Dense,
    spectral: TransformerStack,
    frame_head: Dense,
    convs: Vec<Conv1d>,
    conv_ln: LayerNorm,
    wave_proj: Dense,
    waveform: TransformerStack,
    recon_head: Dense,
}

impl DualEncoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut r = rng::derive(seed, 0xe4c);
        let scfg = TransformerEncoderConfig {
            layers: cfg.spectral_layers,
            model_dim: cfg.spectral_dim,
            heads: cfg.heads,
            ff_dim: 2 * cfg.spectral_dim,
            dropout: 0.0,
        };
        let wcfg = TransformerEncoderConfig {
            layers: cfg.waveform_layers,
            model_dim: cfg.waveform_dim,
            heads: cfg.heads,
            ff_dim: 2 * cfg.waveform_dim,
            dropout: 0.0,
        };
        let lift = Dense::new(&mut store, "spectral.lift", N_MELS, cfg.spectral_dim, &mut r)?;
        let spectral = TransformerStack::new(&mut store, "spectral.stack", &scfg, cfg.max_frames, false, &mut r)?;
        let frame_head = Dense::new(&mut store, "spectral.frame_head", cfg.spectral_dim, FRAME_CLASSES, &mut r)?;
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &k) in WAVEFORM_STRIDES.iter().enumerate() {
            convs.push(Conv1d::new(&mut store, &format!("waveform.conv{i}"), c_in, cfg.conv_channels, k, k, 0, &mut r)?);
            c_in = cfg.conv_channels;
        }
        let conv_ln = LayerNorm::new(&mut store, "waveform.conv_ln", cfg.conv_channels)?;
        let wave_proj = Dense::new(&mut store, "waveform.proj", cfg.conv_channels, cfg.waveform_dim, &mut r)?;
        let max_wave = cfg.max_frames / 2 + 1;
        let waveform = TransformerStack::new(&mut store, "waveform.stack", &wcfg, max_wave, false, &mut r)?;
        let recon_head = Dense::new(&mut store, "waveform.recon_head", cfg.waveform_dim, WAVEFORM_HOP, &mut r)?;
        store.set_trainable("", false);
        Ok(Self {
            cfg,
            store,
            pretrained: false,
            mel: LogMel::new(),
            lift,
            spectral,
            frame_head,
            convs,
            conv_ln,
            wave_proj,
            waveform,
            recon_head,
        })
    }

    pub fn log_mel(&self, w: &Waveform) -> Result<MelSpectrogram> {
        self.mel.compute(w)
    }

    fn spectral_graph(&self, g: &mut Graph<'_, f32>, mel: &MelSpectrogram) -> Result<NodeId> {
        if mel.frames.cols() != N_MELS {
            return Err(dim_err("spectral_encode", format!("{} channels, need {N_MELS}", mel.frames.cols())));
        }
        let x = g.constant(mel.frames.map(|v| (v + MEL_SHIFT) * MEL_SCALE));
        let h = self.lift.forward(g, x)?;
        self.spectral.forward(g, h)
    }

    /// Conv front-end output before the transformer, `[T x D_m]`.
    fn waveform_front(&self, g: &mut Graph<'_, f32>, w: &Waveform) -> Result<NodeId> {
        let n = w.samples.len();
        let need = WAVEFORM_HOP;
        if n < need {
            return Err(Error::Length { op: "waveform_encode", got: n, need });
        }
        let x = g.constant(Tensor::new(&[n, 1], w.samples.clone())?);
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, h)?;
            h = g.gelu(h);
        }
        let h = self.conv_ln.forward(g, h)?;
        self.wave_proj.forward(g, h)
    }

    pub fn spectral_encode(&self, mel: &MelSpectrogram) -> Result<EncoderFeatures> {
        let mut g = Graph::new(&self.store);
        let h = self.spectral_graph(&mut g, mel)?;
        Ok(EncoderFeatures {
            source: FeatureSource::Spectral,
            frames: g.value(h).clone(),
            frame_rate: SAMPLE_RATE as f64 / HOP as f64,
            offset: (N_FFT / 2) as f64 / SAMPLE_RATE as f64,
        })
    }

    pub fn waveform_encode(&self, w: &Waveform) -> Result<EncoderFeatures> {
        let mut g = Graph::new(&self.store);
        let h = self.waveform_front(&mut g, w)?;
        let h = self.waveform.forward(&mut g, h)?;
        Ok(EncoderFeatures {
            source: FeatureSource::Waveform,
            frames: g.value(h).clone(),
            frame_rate: SAMPLE_RATE as f64 / WAVEFORM_HOP as f64,
            offset: (WAVEFORM_HOP / 2) as f64 / SAMPLE_RATE as f64,
        })
    }

    /// Both views of one utterance.
    pub fn encode(&self, w: &Waveform) -> Result<(EncoderFeatures, EncoderFeatures)> {
        let mel = self.log_mel(w)?;
        Ok((self.spectral_encode(&mel)?, self.waveform_encode(w)?))
    }

    /// Fraction of spectral frames whose pretraining head predicts the
    /// frame's token class.
    pub fn frame_accuracy(&self, corpus: &Corpus, items: &[usize]) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for &i in items {
            let rec = &corpus.records[i];
            let w = corpus.render(rec)?;
            let mel = self.log_mel(&w)?;
            let labels = frame_labels(&rec.transcript, mel.num_frames())?;
            let mut g = Graph::new(&self.store);
            let h = self.spectral_graph(&mut g, &mel)?;
            let logits = self.frame_head.forward(&mut g, h)?;
            for (p, l) in g.value(logits).argmax_rows().into_iter().zip(labels) {
                hit += usize::from(p == l);
                total += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
    }
}

/// Per-frame token classes for the spectral pretraining objective.
pub fn frame_labels(transcript: &str, frames: usize) -> Result<Vec<usize>> {
    let toks = acoustic_tokens(transcript);
    (0..frames)
        .map(|t| {
            let c = toks[frame_token(t).min(toks.len() - 1)];
            frame_class(c).ok_or_else(|| Error::UnknownToken(c.into()))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self { steps: 400, batch: 4, lr: 2e-3, mask_prob: 0.2, mask_span: 2, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub spectral_loss: Vec<f64>,
    pub waveform_loss: Vec<f64>,
    /// Held-out frame accuracy of the spectral classifier.
    pub frame_accuracy: f64,
}

fn check_loss(v: f32, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v as f64)
    } else {
        Err(Error::Aborted(format!("{what} pretraining diverged (non-finite loss)")))
    }
}

/// Train each encoder alone on the training split, then freeze both.
/// Spectral: frame-wise token classification. Waveform: reconstruct the raw
/// samples of masked frames from context.
pub fn pretrain_encoders(enc: &mut DualEncoder, corpus: &Corpus, opts: &PretrainOptions) -> Result<PretrainReport> {
    let train: Vec<usize> = corpus.split(Split::Train).map(|(i, _)| i).collect();
    if train.is_empty() {
        return Err(Error::Precondition("no training utterances".into()));
    }
    let mut r = rng::derive(opts.seed, 0x9e7);
    enc.store.set_trainable("spectral.", true);
    let spectral_loss = run_pretrain(enc, corpus, &train, opts, &mut r, Stage::Spectral)?;
    enc.store.set_trainable("", false);
    enc.store.set_trainable("waveform.", true);
    let waveform_loss = run_pretrain(enc, corpus, &train, opts, &mut r, Stage::Waveform)?;
    enc.store.set_trainable("", false);
    enc.pretrained = true;
    let dev: Vec<usize> = corpus.split(Split::Dev).map(|(i, _)| i).collect();
    let frame_accuracy = enc.frame_accuracy(corpus, &dev)?;
    Ok(PretrainReport { spectral_loss, waveform_loss, frame_accuracy })
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    Spectral,
    Waveform,
}

fn run_pretrain(
    enc: &mut DualEncoder,
    corpus: &Corpus,
    train: &[usize],
    opts: &PretrainOptions,
    r: &mut impl Rng,
    stage: Stage,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(&enc.store, AdamConfig { clip_norm: 5.0, ..AdamConfig::default() });
    let mut losses = Vec::with_capacity(opts.steps);
    let mut order: Vec<usize> = train.to_vec();
    order.shuffle(r);
    let mut cursor = 0;
    for step in 1..=opts.steps {
        let mut buf = GradBuffer::for_store(&enc.store);
        let mut total = 0.0;
        for _ in 0..opts.batch {
            if cursor == order.len() {
                order.shuffle(r);
                cursor = 0;
            }
            let rec = &corpus.records[order[cursor]];
            cursor += 1;
            let w = corpus.render(rec)?;
            let mut g = Graph::new(&enc.store);
            let loss = match stage {
                Stage::Spectral => {
                    let mel = enc.log_mel(&w)?;
                    let labels = frame_labels(&rec.transcript, mel.num_frames())?;
                    let h = enc.spectral_graph(&mut g, &mel)?;
                    let logits = enc.frame_head.forward(&mut g, h)?;
                    g.cross_entropy(logits, &labels)?
                }
                Stage::Waveform => waveform_objective(enc, &mut g, &w, opts, r)?,
            };
            let name = if stage == Stage::Spectral { "spectral" } else { "waveform" };
            total += check_loss(g.scalar(loss), name)?;
            g.backward(loss, &mut buf)?;
        }
        buf.scale(1.0 / opts.batch as f32);
        let warm = (opts.steps / 10).max(1) as f64;
        let lr = opts.lr * (step as f64 / warm).min(1.0);
        adam.step(&mut enc.store, &buf, lr)?;
        losses.push(total / opts.batch as f64);
    }
    Ok(losses)
}

fn waveform_objective(
    enc: &DualEncoder,
    g: &mut Graph<'_, f32>,
    w: &Waveform,
    opts: &PretrainOptions,
    r: &mut impl Rng,
) -> Result<NodeId> {
    let h = enc.waveform_front(g, w)?;
    let (t, d) = (g.rows(h), g.cols(h));
    let mut masked = vec![false; t];
    for s in 0..t {
        if r.gen::<f64>() < opts.mask_prob {
            for m in masked.iter_mut().skip(s).take(opts.mask_span) {
                *m = true;
            }
        }
    }
    if !masked.iter().any(|&m| m) {
        masked[r.gen_range(0..t)] = true;
    }
    let keep: Vec<f32> = masked.iter().flat_map(|&m| core::iter::repeat(if m { 0.0 } else { 1.0 }).take(d)).collect();
    let keep = g.constant(Tensor::new(&[t, d], keep)?);
    let h = g.mul(h, keep)?;
    let h = enc.waveform.forward(g, h)?;
    let pred = enc.recon_head.forward(g, h)?;
    let target: Vec<f32> = w.samples[..t * WAVEFORM_HOP].iter().map(|&s| s * WAVE_TARGET_SCALE).collect();
    let target = Tensor::new(&[t, WAVEFORM_HOP], target)?;
    let masked_rows: Vec<usize> = (0..t).filter(|&i| masked[i]).collect();
    let visible_rows: Vec<usize> = (0..t).filter(|&i| !masked[i]).collect();
    let lm = g.mse_rows(pred, target.clone(), &masked_rows)?;
    if visible_rows.is_empty() {
        return Ok(lm);
    }
    let lv = g.mse_rows(pred, target, &visible_rows)?;
    g.lin(&[(lm, 1.0), (lv, 0.5)])
}
