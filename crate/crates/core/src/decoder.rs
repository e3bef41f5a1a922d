//! Small causal text decoder. Consumes `[prompt; speech; labels]`, scores
//! the labels with cross-entropy and decodes greedily.
//!
//! Besides the absolute positions of the transformer stack, every position
//! carries a segment-type embedding (prompt, speech, first label segment,
//! second label segment) and a position relative to the start of its own
//! segment, so label `k` can find its speech frames whatever the prompt
//! length.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::audio::mel::{HOP, N_FFT};
use crate::audio::synth::TOKEN_SAMPLES;
use crate::corpus::{acoustic_tokens, ast_target, LanguageSpec, Reordering, Translator};
use crate::error::{dim_err, Error, Result};
use crate::nn::{Dense, GradBuffer, Graph, NodeId, ParamId, ParamStore, TransformerEncoderConfig, TransformerStack};
use crate::real::Real;
use crate::rng;
use crate::tensor::{argmax, Tensor};
use crate::training::{Adam, AdamConfig};
use crate::vocab::{task_labels, PromptTemplate, Task, Vocab};

pub const SEG_PROMPT: usize = 0;
pub const SEG_SPEECH: usize = 1;
pub const SEG_LABEL: usize = 2;
pub const SEG_LABEL_AFTER_SEP: usize = 3;

/// Speech-embedding length for an utterance of `tokens` rendered tokens.
pub fn speech_len_for_tokens(tokens: usize) -> usize {
    let samples = tokens * TOKEN_SAMPLES;
    if samples < N_FFT {
        return 0;
    }
    let mel = (samples - N_FFT) / HOP + 1;
    mel.div_ceil(2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { model_dim: 64, layers: 3, heads: 4, ff_dim: 256, max_len: 192 }
    }
}

/// One decoder input: token ids around a speech span of `speech_len` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderSequence {
    pub prompt: Vec<usize>,
    pub speech_len: usize,
    /// Label tokens fed as inputs (no end token).
    pub labels: Vec<usize>,
    /// Per-position flag: true where the position predicts a label or the end token.
    pub loss_mask: Vec<bool>,
    /// Prediction targets of the masked-in positions, in order.
    pub targets: Vec<usize>,
}

impl DecoderSequence {
    pub fn new(prompt: Vec<usize>, speech_len: usize, labels: Vec<usize>, eos: usize) -> Result<Self> {
        if speech_len == 0 {
            return Err(Error::Precondition("speech span must be non-empty".into()));
        }
        let total = prompt.len() + speech_len + labels.len();
        let mut loss_mask = vec![false; total];
        let mut targets = Vec::new();
        if !labels.is_empty() {
            let first = prompt.len() + speech_len - 1;
            for m in &mut loss_mask[first..] {
                *m = true;
            }
            targets.extend_from_slice(&labels);
            targets.push(eos);
        }
        Ok(Self { prompt, speech_len, labels, loss_mask, targets })
    }

    pub fn len(&self) -> usize {
        self.loss_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss_mask.is_empty()
    }

    /// Index of the first masked-in position.
    pub fn first_scored(&self) -> usize {
        self.prompt.len() + self.speech_len - 1
    }

    /// Segment type and within-segment position of each label.
    pub fn label_segments(&self, sep: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.labels.len());
        let mut sep_at = None;
        for (i, &t) in self.labels.iter().enumerate() {
            if sep_at.is_none() && t == sep {
                sep_at = Some(i);
            }
            out.push(match sep_at {
                Some(s) => (SEG_LABEL_AFTER_SEP, i - s),
                None => (SEG_LABEL, i),
            });
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLm {
    pub cfg: DecoderConfig,
    pub vocab_size: usize,
    sep: usize,
    tok_emb: ParamId,
    speech_pos: ParamId,
    label_pos: ParamId,
    seg_emb: ParamId,
    stack: TransformerStack,
    head: Dense,
}

impl DecoderLm {
    /// Register decoder parameters under `decoder.` in `store`.
    pub fn new(store: &mut ParamStore, cfg: DecoderConfig, vocab: &Vocab, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.model_dim;
        let tcfg = TransformerEncoderConfig {
            layers: cfg.layers,
            model_dim: d,
            heads: cfg.heads,
            ff_dim: cfg.ff_dim,
            dropout: 0.0,
        };
        let v = vocab.len();
        Ok(Self {
            cfg,
            vocab_size: v,
            sep: vocab.sep(),
            tok_emb: store.add_normal("decoder.tok_emb", &[v, d], 0.5, rng)?,
            speech_pos: store.add_normal("decoder.speech_pos", &[cfg.max_len, d], 0.1, rng)?,
            label_pos: store.add_normal("decoder.label_pos", &[cfg.max_len, d], 0.1, rng)?,
            seg_emb: store.add_normal("decoder.seg_emb", &[4, d], 0.1, rng)?,
            stack: TransformerStack::new(store, "decoder.stack", &tcfg, cfg.max_len, true, rng)?,
            head: Dense::new(store, "decoder.head", d, v, rng)?,
        })
    }

    /// Input rows for the whole sequence with segment and position
    /// embeddings added; `speech` is inserted verbatim.
    pub fn embed_and_concat<F: Real>(&self, g: &mut Graph<'_, F>, seq: &DecoderSequence, speech: NodeId) -> Result<NodeId> {
        let d = self.cfg.model_dim;
        if g.cols(speech) != d || g.rows(speech) != seq.speech_len {
            return Err(dim_err(
                "embed_and_concat",
                format!("speech {}x{} vs {}x{d}", g.rows(speech), g.cols(speech), seq.speech_len),
            ));
        }
        if seq.len() > self.cfg.max_len {
            return Err(Error::ContextLength { len: seq.len(), max: self.cfg.max_len });
        }
        let tok = g.param(self.tok_emb);
        let mut parts = Vec::with_capacity(3);
        let mut segs = Vec::with_capacity(seq.len());
        if !seq.prompt.is_empty() {
            parts.push(g.gather(tok, &seq.prompt)?);
            segs.extend(core::iter::repeat(SEG_PROMPT).take(seq.prompt.len()));
        }
        let sp = g.param(self.speech_pos);
        let sp = g.slice_rows(sp, 0, seq.speech_len)?;
        parts.push(g.add(speech, sp)?);
        segs.extend(core::iter::repeat(SEG_SPEECH).take(seq.speech_len));
        if !seq.labels.is_empty() {
            let (ls, rel): (Vec<usize>, Vec<usize>) = seq.label_segments(self.sep).into_iter().unzip();
            let e = g.gather(tok, &seq.labels)?;
            let lp = g.param(self.label_pos);
            let lp = g.gather(lp, &rel)?;
            parts.push(g.add(e, lp)?);
            segs.extend(ls);
        }
        let x = g.concat_rows(&parts)?;
        let se = g.param(self.seg_emb);
        let se = g.gather(se, &segs)?;
        g.add(x, se)
    }

    /// Logits `[n+1 x V]` of the masked-in positions.
    pub fn scored_logits<F: Real>(&self, g: &mut Graph<'_, F>, seq: &DecoderSequence, speech: NodeId) -> Result<NodeId> {
        if seq.targets.is_empty() {
            return Err(Error::DegenerateLoss);
        }
        let x = self.embed_and_concat(g, seq, speech)?;
        let h = self.stack.forward(g, x)?;
        let start = seq.first_scored();
        let h = g.slice_rows(h, start, seq.len() - start)?;
        self.head.forward(g, h)
    }

    /// Cross-entropy averaged over the masked-in positions only.
    pub fn ce_loss<F: Real>(&self, g: &mut Graph<'_, F>, seq: &DecoderSequence, speech: NodeId) -> Result<NodeId> {
        let logits = self.scored_logits(g, seq, speech)?;
        g.cross_entropy(logits, &seq.targets)
    }

    /// Logits of every position, `[len x V]`.
    pub fn all_logits<F: Real>(&self, g: &mut Graph<'_, F>, seq: &DecoderSequence, speech: NodeId) -> Result<NodeId> {
        let x = self.embed_and_concat(g, seq, speech)?;
        let h = self.stack.forward(g, x)?;
        self.head.forward(g, h)
    }

    /// Argmax decoding until the end token or `max_new` tokens.
    pub fn greedy_generate<F: Real>(
        &self,
        store: &ParamStore<F>,
        prompt: &[usize],
        speech: &Tensor<F>,
        eos: usize,
        max_new: usize,
    ) -> Result<Generation> {
        let mut labels = Vec::new();
        while labels.len() < max_new {
            let seq = DecoderSequence::new(prompt.to_vec(), speech.rows(), labels.clone(), eos)?;
            if seq.len() > self.cfg.max_len {
                break;
            }
            let mut g = Graph::new(store);
            let s = g.constant(speech.clone());
            let x = self.embed_and_concat(&mut g, &seq, s)?;
            let h = self.stack.forward(&mut g, x)?;
            let last = g.slice_rows(h, seq.len() - 1, 1)?;
            let logits = self.head.forward(&mut g, last)?;
            let next = argmax(g.value(logits).data());
            if next == eos {
                return Ok(Generation { tokens: labels, truncated: false });
            }
            labels.push(next);
        }
        Ok(Generation { tokens: labels, truncated: true })
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// Stopped at the length limit instead of the end token.
    pub truncated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmPretrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Std of the Gaussian noise added to synthetic speech rows.
    pub noise: f64,
    pub seed: u64,
}

impl Default for LmPretrainOptions {
    fn default() -> Self {
        Self { steps: 3000, batch: 8, lr: 2e-3, noise: 0.3, seed: 11 }
    }
}

/// Stand-in speech span for text-only pretraining: every rendered token
/// occupies its speech rows with its own embedding plus the source-language
/// tag embedding; rows at token edges blend in the neighbour; Gaussian noise
/// on top.
pub fn synthetic_speech(
    store: &ParamStore,
    dec: &DecoderLm,
    tokens: &[usize],
    lang_tag: usize,
    noise: f64,
    r: &mut impl Rng,
) -> Result<Tensor<f32>> {
    let t_e = speech_len_for_tokens(tokens.len());
    if t_e == 0 {
        return Err(Error::Length { op: "synthetic_speech", got: tokens.len(), need: 1 });
    }
    let emb = store.value(dec.tok_emb);
    let d = dec.cfg.model_dim;
    let per = t_e.div_ceil(tokens.len());
    let mut out = Vec::with_capacity(t_e * d);
    for j in 0..t_e {
        let k = (j / per).min(tokens.len() - 1);
        let nb = if j % per == 0 && k > 0 {
            Some(k - 1)
        } else if j % per == per - 1 && k + 1 < tokens.len() {
            Some(k + 1)
        } else {
            None
        };
        let lam = if nb.is_some() { rng::uniform(r, 0.0, 0.3) as f32 } else { 0.0 };
        for c in 0..d {
            let mut v = emb.get(tokens[k], c) * (1.0 - lam) + emb.get(lang_tag, c);
            if let Some(n) = nb {
                v += lam * emb.get(tokens[n], c);
            }
            out.push(v + (noise * rng::normal(r)) as f32);
        }
    }
    Tensor::new(&[t_e, d], out)
}

/// One pretraining example: prompt, stand-in speech tokens, labels.
pub struct LmExample {
    pub prompt: Vec<usize>,
    pub source: Vec<usize>,
    pub language: usize,
    pub labels: Vec<usize>,
}

pub fn sample_lm_example(
    languages: &[LanguageSpec],
    translators: &[Translator],
    vocab: &Vocab,
    r: &mut impl Rng,
) -> Result<LmExample> {
    let l = r.gen_range(0..languages.len());
    let task = *Task::ALL.choose(r).ok_or(Error::DegenerateLoss)?;
    let text = languages[l].sample_transcript(r);
    let translation = translators[l].translate(&text)?;
    let source: String = acoustic_tokens(&text).into_iter().collect();
    let source = vocab.encode_text(&source)?;
    let target = if task == Task::Asr { None } else { Some(ast_target(l)) };
    let prompt = PromptTemplate::render(task, target, vocab)?.tokens;
    let labels = task_labels(task, &text, Some(&translation), vocab)?;
    Ok(LmExample { prompt, source, language: l, labels })
}

/// Translators from each language to its translation target.
pub fn target_translators(languages: &[LanguageSpec], reordering: Reordering) -> Result<Vec<Translator>> {
    languages.iter().map(|s| Translator::new(s, &languages[ast_target(s.id)], reordering)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmPretrainReport {
    pub losses: Vec<f64>,
}

/// Train the decoder on text-only copy, translate and chain-of-thought
/// examples, then freeze it.
pub fn pretrain_decoder(
    store: &mut ParamStore,
    dec: &DecoderLm,
    languages: &[LanguageSpec],
    reordering: Reordering,
    vocab: &Vocab,
    opts: &LmPretrainOptions,
) -> Result<LmPretrainReport> {
    let translators = target_translators(languages, reordering)?;
    let mut r = rng::derive(opts.seed, 0xdec);
    store.set_trainable("", false);
    store.set_trainable("decoder.", true);
    let mut adam = Adam::new(store, AdamConfig { clip_norm: 5.0, ..AdamConfig::default() });
    let mut losses = Vec::with_capacity(opts.steps);
    let warm = (opts.steps / 10).max(1) as f64;
    for step in 1..=opts.steps {
        let mut buf = GradBuffer::for_store(store);
        let mut total = 0.0;
        for _ in 0..opts.batch {
            let ex = sample_lm_example(languages, &translators, vocab, &mut r)?;
            let speech = synthetic_speech(store, dec, &ex.source, vocab.lang_tag(ex.language)?, opts.noise, &mut r)?;
            let seq = DecoderSequence::new(ex.prompt, speech.rows(), ex.labels, vocab.eos())?;
            let mut g = Graph::new(store);
            let s = g.constant(speech);
            let loss = dec.ce_loss(&mut g, &seq, s)?;
            let v = g.scalar(loss);
            if !v.is_finite() {
                return Err(Error::Aborted("decoder pretraining diverged (non-finite loss)".into()));
            }
            total += v as f64;
            g.backward(loss, &mut buf)?;
        }
        buf.scale(1.0 / opts.batch as f32);
        let lr = opts.lr * (step as f64 / warm).min(1.0) * libm::sqrt(warm / (step as f64).max(warm));
        adam.step(store, &buf, lr)?;
        losses.push(total / opts.batch as f64);
    }
    store.set_trainable("decoder.", false);
    Ok(LmPretrainReport { losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::language_specs;

    fn setup() -> (ParamStore, DecoderLm, Vocab) {
        let vocab = Vocab::build(&["alpha", "beta"]).unwrap();
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { model_dim: 16, layers: 1, heads: 2, ff_dim: 32, max_len: 96 };
        let dec = DecoderLm::new(&mut store, cfg, &vocab, &mut rng::rng(3)).unwrap();
        (store, dec, vocab)
    }

    #[test]
    fn speech_length_arithmetic() {
        assert_eq!(speech_len_for_tokens(10), 49);
        assert_eq!(speech_len_for_tokens(1), 4);
        assert_eq!(speech_len_for_tokens(0), 0);
    }

    #[test]
    fn sequence_layout_and_mask() {
        let s = DecoderSequence::new(vec![5; 6], 49, vec![7; 10], 1).unwrap();
        assert_eq!(s.len(), 65);
        assert_eq!(s.loss_mask.iter().filter(|&&m| m).count(), 11);
        assert_eq!(s.targets.len(), 11);
        assert!(!s.loss_mask[..54].iter().any(|&m| m));
        let e = DecoderSequence::new(vec![5; 6], 49, vec![], 1).unwrap();
        assert!(e.loss_mask.iter().all(|&m| !m));
        assert!(DecoderSequence::new(vec![5], 0, vec![], 1).is_err());
        let c = DecoderSequence::new(vec![], 3, vec![8, 9, 2, 8, 9], 1).unwrap();
        assert_eq!(c.label_segments(2), vec![(2, 0), (2, 1), (3, 0), (3, 1), (3, 2)]);
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let (mut store, dec, vocab) = setup();
        for p in store.iter_mut() {
            if p.name.starts_with("decoder.head") {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let seq = DecoderSequence::new(vec![10, 11], 4, vec![12, 13, 14], vocab.eos()).unwrap();
        let mut g = Graph::new(&store);
        let s = g.constant(Tensor::filled(&[4, 16], 0.1));
        let loss = dec.ce_loss(&mut g, &seq, s).unwrap();
        assert!((g.scalar(loss) as f64 - libm::log(vocab.len() as f64)).abs() < 1e-5);
    }

    #[test]
    fn causal_prefix_invariance() {
        let (store, dec, vocab) = setup();
        let a = DecoderSequence::new(vec![10, 11], 4, vec![12, 13, 14], vocab.eos()).unwrap();
        let b = DecoderSequence::new(vec![10, 11], 4, vec![12, 20, 21], vocab.eos()).unwrap();
        let speech = Tensor::filled(&[4, 16], 0.2);
        let run = |seq: &DecoderSequence| {
            let mut g = Graph::new(&store);
            let s = g.constant(speech.clone());
            let l = dec.all_logits(&mut g, seq, s).unwrap();
            g.value(l).clone()
        };
        let (la, lb) = (run(&a), run(&b));
        for i in 0..7 {
            assert_eq!(la.row(i), lb.row(i), "position {i}");
        }
        assert_ne!(la.row(7), lb.row(7));
    }

    #[test]
    fn context_and_shape_errors() {
        let (store, dec, vocab) = setup();
        let seq = DecoderSequence::new(vec![10; 90], 4, vec![12, 13, 14], vocab.eos()).unwrap();
        let mut g = Graph::new(&store);
        let s = g.constant(Tensor::zeros(&[4, 16]));
        assert!(matches!(dec.ce_loss(&mut g, &seq, s), Err(Error::ContextLength { .. })));
        let seq = DecoderSequence::new(vec![10], 5, vec![12], vocab.eos()).unwrap();
        assert!(dec.ce_loss(&mut g, &seq, s).is_err());
        let seq = DecoderSequence::new(vec![10], 4, vec![], vocab.eos()).unwrap();
        assert_eq!(dec.ce_loss(&mut g, &seq, s), Err(Error::DegenerateLoss));
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let (store, dec, vocab) = setup();
        let speech = Tensor::filled(&[4, 16], 0.3);
        let a = dec.greedy_generate(&store, &[10, 11], &speech, vocab.eos(), 5).unwrap();
        let b = dec.greedy_generate(&store, &[10, 11], &speech, vocab.eos(), 5).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.len() <= 5);
        assert_eq!(a.truncated, a.tokens.len() == 5);
    }

    #[test]
    fn short_pretraining_lowers_loss() {
        let langs = language_specs(2, 5).unwrap();
        let names: Vec<&str> = langs.iter().map(|l| l.name.as_str()).collect();
        let vocab = Vocab::build(&names).unwrap();
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { model_dim: 16, layers: 1, heads: 2, ff_dim: 32, max_len: 128 };
        let dec = DecoderLm::new(&mut store, cfg, &vocab, &mut rng::rng(4)).unwrap();
        let opts = LmPretrainOptions { steps: 60, batch: 4, lr: 3e-3, ..Default::default() };
        let rep = pretrain_decoder(&mut store, &dec, &langs, Reordering::SwapTokenPairs, &vocab, &opts).unwrap();
        let head: f64 = rep.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = rep.losses[50..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
        assert_eq!(store.trainable_count(), 0);
    }
}
