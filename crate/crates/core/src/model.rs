//! The trainable speech-to-text model: connector and decoder sharing one
//! parameter store. The frozen encoders live apart so their features can be
//! computed once.

use alloc::vec::Vec;

use crate::connector::{Connector, ConnectorConfig, ConnectorOutput, Routing};
use crate::ctc::ctc_loss_node;
use crate::decoder::{DecoderConfig, DecoderLm, DecoderSequence, Generation};
use crate::encoders::EncoderFeatures;
use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, ParamStore};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub connector: ConnectorConfig,
    pub decoder: DecoderConfig,
    pub spectral_dim: usize,
    pub waveform_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { connector: ConnectorConfig::default(), decoder: DecoderConfig::default(), spectral_dim: 64, waveform_dim: 48 }
    }
}

#[derive(Clone, Debug)]
pub struct SpeechModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub connector: Connector,
    pub decoder: DecoderLm,
}

/// One utterance as the model consumes it.
#[derive(Clone, Copy, Debug)]
pub struct UtteranceInput<'a> {
    pub spectral: &'a EncoderFeatures,
    pub waveform: Option<&'a EncoderFeatures>,
    pub language: usize,
    pub prompt: &'a [usize],
    pub labels: &'a [usize],
    pub ctc_target: &'a [usize],
}

/// Loss components of one utterance. `all` is the graph node to
/// differentiate; the numbers are its parts.
#[derive(Clone, Debug)]
pub struct UtteranceLoss {
    pub all: NodeId,
    pub dec: f64,
    pub ctc: f64,
    pub lid: f64,
    pub all_value: f64,
    pub lid_correct: Option<bool>,
    pub selected: Option<usize>,
    pub gate: Option<f64>,
}

/// Loss weights after dropping the terms a variant does not have.
pub fn effective_weights(cfg: &ConnectorConfig, alpha: f64, beta: f64) -> (f64, f64) {
    let a = if cfg.variant.ctc() { alpha } else { 0.0 };
    let b = if cfg.variant.lid() { beta } else { 0.0 };
    (a, b)
}

impl SpeechModel {
    /// Fresh model; the decoder is frozen, the connector trainable.
    pub fn new(cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut r = rng::derive(seed, 0xd1);
        let decoder = DecoderLm::new(&mut store, cfg.decoder, &vocab, &mut r)?;
        let mut r = rng::derive(seed, 0xc0);
        let languages = vocab.language_names().len();
        let connector = Connector::new(
            &mut store,
            cfg.connector,
            cfg.spectral_dim,
            cfg.waveform_dim,
            cfg.decoder.model_dim,
            languages,
            vocab.len(),
            &mut r,
        )?;
        store.set_trainable("decoder.", false);
        Ok(Self { cfg, vocab, store, connector, decoder })
    }

    pub fn languages(&self) -> usize {
        self.connector.languages
    }

    /// Copy every `decoder.` parameter from a pretrained store.
    pub fn load_decoder(&mut self, pretrained: &ParamStore) -> Result<()> {
        let n = self.store.load_matching(pretrained, "decoder.");
        let want = self.store.iter().filter(|(_, p)| p.name.starts_with("decoder.")).count();
        if n != want {
            return Err(Error::IncompatibleCheckpoint(alloc::format!("decoder: matched {n} of {want} parameters")));
        }
        Ok(())
    }

    pub fn connector_forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        u: &UtteranceInput<'_>,
        routing: Routing,
    ) -> Result<ConnectorOutput> {
        self.connector.forward(g, u.spectral, u.waveform, routing)
    }

    /// `(1-α) L_dec + α L_CTC + β L_LID` for one utterance.
    pub fn utterance_loss<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        u: &UtteranceInput<'_>,
        routing: Routing,
        alpha: f64,
        beta: f64,
    ) -> Result<UtteranceLoss> {
        let out = self.connector_forward(g, u, routing)?;
        let seq = DecoderSequence::new(u.prompt.to_vec(), g.rows(out.speech), u.labels.to_vec(), self.vocab.eos())?;
        let ld = self.decoder.ce_loss(g, &seq, out.speech)?;
        let (a, b) = effective_weights(&self.connector.cfg, alpha, beta);
        let mut terms = alloc::vec![(ld, F::of(1.0 - a))];
        let mut ctc = 0.0;
        if let Some(logits) = out.ctc_logits {
            let lc = ctc_loss_node(g, logits, u.ctc_target)?;
            ctc = g.scalar(lc).as_f64();
            terms.push((lc, F::of(a)));
        }
        let mut lid = 0.0;
        let mut lid_correct = None;
        if let Some(p) = &out.lid {
            let ll = g.cross_entropy(p.logits, &[u.language])?;
            lid = g.scalar(ll).as_f64();
            lid_correct = Some(p.predicted == u.language);
            terms.push((ll, F::of(b)));
        }
        let dec = g.scalar(ld).as_f64();
        let all = g.lin(&terms)?;
        let all_value = g.scalar(all).as_f64();
        Ok(UtteranceLoss {
            all,
            dec,
            ctc,
            lid,
            all_value,
            lid_correct,
            selected: out.selected,
            gate: out.gate.map(|g| g.1),
        })
    }

    /// Greedy decoding with the LID-selected gate.
    pub fn generate(&self, u: &UtteranceInput<'_>, max_new: usize) -> Result<(Generation, Decoded)> {
        let mut g = Graph::new(&self.store);
        let out = self.connector_forward(&mut g, u, Routing::Predicted)?;
        let speech = g.value(out.speech).clone();
        let decoded = Decoded {
            lid: out.lid.as_ref().map(|p| p.predicted),
            gate: out.gate.map(|x| x.1),
            pooled_speech: speech.mean_rows(),
        };
        drop(g);
        let gen = self.decoder.greedy_generate(&self.store, u.prompt, &speech, self.vocab.eos(), max_new)?;
        Ok((gen, decoded))
    }

    /// Mean over time of the speech embedding.
    pub fn pooled_speech(&self, u: &UtteranceInput<'_>) -> Result<Vec<f32>> {
        let mut g = Graph::new(&self.store);
        let out = self.connector_forward(&mut g, u, Routing::Predicted)?;
        Ok(g.value(out.speech).mean_rows())
    }

    pub fn speech_embedding(&self, u: &UtteranceInput<'_>) -> Result<Tensor<f32>> {
        let mut g = Graph::new(&self.store);
        let out = self.connector_forward(&mut g, u, Routing::Predicted)?;
        Ok(g.value(out.speech).clone())
    }
}

/// Side information from a decoding pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub lid: Option<usize>,
    pub gate: Option<f64>,
    pub pooled_speech: Vec<f32>,
}
