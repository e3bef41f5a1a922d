//! Language-adapted connector: per-stream adapters, utterance-level language
//! identification, the per-language fusion gate, blank-frame alignment,
//! downsampling, projection into the decoder space and the CTC head.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoders::{EncoderFeatures, FeatureSource};
use crate::error::{dim_err, Error, Result};
use crate::nn::{downsample_conv, Conv1d, Dense, Graph, NodeId, ParamId, ParamStore, TransformerEncoderConfig, TransformerStack};
use crate::real::Real;
use crate::tensor::{argmax, Tensor};

/// Where the shorter stream's frames land on the common time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlankPlacement {
    /// Frames stay in order at the head; blanks fill the tail.
    Tail,
    /// Each frame goes to the row nearest its centre time; blanks fill the gaps.
    TimeAligned,
}

impl BlankPlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            BlankPlacement::Tail => "tail",
            BlankPlacement::TimeAligned => "time-aligned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tail" => Ok(BlankPlacement::Tail),
            "time-aligned" => Ok(BlankPlacement::TimeAligned),
            _ => Err(Error::Config(format!("unknown blank placement {s:?}"))),
        }
    }
}

/// Model variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Both encoders, language-selected gate, LID and CTC losses.
    Full,
    /// Both encoders mixed with a fixed weight; LID and CTC kept.
    NoWeightSelector,
    /// Spectral encoder only, CTC kept.
    SingleEncoder,
    /// Spectral encoder only, decoder loss only.
    SingleEncoderNoCtc,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::Full, Variant::NoWeightSelector, Variant::SingleEncoder, Variant::SingleEncoderNoCtc];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoWeightSelector => "no-ws",
            Variant::SingleEncoder => "single",
            Variant::SingleEncoderNoCtc => "single-no-ctc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn dual(self) -> bool {
        matches!(self, Variant::Full | Variant::NoWeightSelector)
    }

    pub fn gated(self) -> bool {
        self == Variant::Full
    }

    pub fn lid(self) -> bool {
        self.dual()
    }

    pub fn ctc(self) -> bool {
        self != Variant::SingleEncoderNoCtc
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConnectorConfig {
    pub variant: Variant,
    pub hidden_dim: usize,
    pub adapter_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_frames: usize,
    pub down_kernel: usize,
    pub placement: BlankPlacement,
    /// Mixing weight of the waveform stream when the gate is disabled.
    pub fixed_gate: f64,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            hidden_dim: 64,
            adapter_layers: 2,
            heads: 4,
            ff_dim: 128,
            max_frames: 400,
            down_kernel: 3,
            placement: BlankPlacement::TimeAligned,
            fixed_gate: 0.5,
        }
    }
}

/// Dense lift into the shared hidden size followed by a transformer stack.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub source: FeatureSource,
    lift: Dense,
    stack: TransformerStack,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterHidden {
    pub node: NodeId,
    pub source: FeatureSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LidPrediction {
    pub logits: NodeId,
    pub predicted: usize,
    pub pooled: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedHidden {
    pub node: NodeId,
    /// Rows where the spectral stream contributed a blank.
    pub blank_spectral: Vec<bool>,
    /// Rows where the waveform stream contributed a blank.
    pub blank_waveform: Vec<bool>,
}

/// Which gate to use for an utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// argmax of the LID adapter
    Predicted,
    /// ground-truth language (teacher forcing)
    Language(usize),
}

#[derive(Clone, Debug)]
pub struct Connector {
    pub cfg: ConnectorConfig,
    pub languages: usize,
    pub ctc_classes: usize,
    spectral: Adapter,
    waveform: Option<Adapter>,
    lid: Option<Dense>,
    gate: Option<ParamId>,
    down: Conv1d,
    proj: Dense,
    ctc_head: Dense,
}

/// Everything the losses and analyses need from one connector pass.
#[derive(Clone, Debug)]
pub struct ConnectorOutput {
    pub hw: AdapterHidden,
    pub hm: Option<AdapterHidden>,
    pub lid: Option<LidPrediction>,
    /// Gate index used for fusion.
    pub selected: Option<usize>,
    /// w′ as a node (gated variant) and as a number.
    pub gate: Option<(NodeId, f64)>,
    pub fused: FusedHidden,
    pub speech: NodeId,
    pub ctc_logits: Option<NodeId>,
}

impl Connector {
    /// Register connector parameters under `connector.`.
    pub fn new(
        store: &mut ParamStore,
        cfg: ConnectorConfig,
        spectral_dim: usize,
        waveform_dim: usize,
        llm_dim: usize,
        languages: usize,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if languages == 0 {
            return Err(Error::Config("connector needs at least one language".into()));
        }
        if !(cfg.fixed_gate > 0.0 && cfg.fixed_gate < 1.0) {
            return Err(Error::Config(format!("fixed gate {} outside (0,1)", cfg.fixed_gate)));
        }
        let tcfg = TransformerEncoderConfig {
            layers: cfg.adapter_layers,
            model_dim: cfg.hidden_dim,
            heads: cfg.heads,
            ff_dim: cfg.ff_dim,
            dropout: 0.0,
        };
        let d = cfg.hidden_dim;
        let adapter = |store: &mut ParamStore, name: &str, source, d_in, rng: &mut _| -> Result<Adapter> {
            Ok(Adapter {
                source,
                lift: Dense::new(store, &format!("connector.{name}.lift"), d_in, d, rng)?,
                stack: TransformerStack::new(store, &format!("connector.{name}"), &tcfg, cfg.max_frames, false, rng)?,
            })
        };
        let spectral = adapter(store, "whisper_adapter", FeatureSource::Spectral, spectral_dim, rng)?;
        let waveform = if cfg.variant.dual() {
            Some(adapter(store, "mms_adapter", FeatureSource::Waveform, waveform_dim, rng)?)
        } else {
            None
        };
        let lid = if cfg.variant.lid() { Some(Dense::new(store, "connector.lid", d, languages, rng)?) } else { None };
        let gate = if cfg.variant.gated() { Some(store.add_filled("connector.gate", &[languages, 1], 0.0)?) } else { None };
        let down = downsample_conv(store, "connector.down", d, d, cfg.down_kernel, rng)?;
        let proj = Dense::new(store, "connector.proj", d, llm_dim, rng)?;
        let ctc_head = Dense::new(store, "connector.ctc_head", d, vocab_size + 1, rng)?;
        Ok(Self { cfg, languages, ctc_classes: vocab_size + 1, spectral, waveform, lid, gate, down, proj, ctc_head })
    }

    pub fn gate_param(&self) -> Option<ParamId> {
        self.gate
    }

    pub fn lid_head(&self) -> Option<&Dense> {
        self.lid.as_ref()
    }

    /// Raw gate values and their sigmoids, one row per language.
    pub fn gate_table(&self, store: &ParamStore) -> Vec<(f64, f64)> {
        match self.gate {
            Some(p) => store.value(p).data().iter().map(|&w| (w as f64, crate::nn::graph::sigmoid(w as f64))).collect(),
            None => {
                let w = if self.cfg.variant.dual() { self.cfg.fixed_gate } else { 0.0 };
                vec![(f64::NAN, w); self.languages]
            }
        }
    }

    pub fn adapt<F: Real>(&self, g: &mut Graph<'_, F>, f: &EncoderFeatures, which: FeatureSource) -> Result<AdapterHidden> {
        let a = match which {
            FeatureSource::Spectral => &self.spectral,
            FeatureSource::Waveform => self
                .waveform
                .as_ref()
                .ok_or_else(|| Error::Precondition("single-encoder connector has no waveform adapter".into()))?,
        };
        if f.source != which {
            return Err(dim_err("adapt", format!("{:?} features fed to {which:?} adapter", f.source)));
        }
        if f.is_empty() {
            return Err(Error::Length { op: "adapt", got: 0, need: 1 });
        }
        let x = g.constant(f.frames.cast());
        let h = a.lift.forward(g, x)?;
        let node = a.stack.forward(g, h)?;
        Ok(AdapterHidden { node, source: which })
    }

    /// Mean-pool each stream, sum, classify.
    pub fn predict_lid<F: Real>(&self, g: &mut Graph<'_, F>, hw: AdapterHidden, hm: AdapterHidden) -> Result<LidPrediction> {
        let head = self.lid.as_ref().ok_or_else(|| Error::Precondition("variant has no LID adapter".into()))?;
        let pw = g.mean_rows(hw.node)?;
        let pm = g.mean_rows(hm.node)?;
        let pooled = g.add(pw, pm)?;
        let logits = head.forward(g, pooled)?;
        let predicted = argmax(g.value(logits).data());
        Ok(LidPrediction { logits, predicted, pooled })
    }

    /// `sigmoid(W[l])` as a graph node.
    pub fn select_gate<F: Real>(&self, g: &mut Graph<'_, F>, language: usize) -> Result<NodeId> {
        let p = self.gate.ok_or_else(|| Error::Precondition("variant has no weight selector".into()))?;
        if language >= self.languages {
            return Err(Error::Index { what: "gate table", index: language, size: self.languages });
        }
        let t = g.param(p);
        let w = g.gather(t, &[language])?;
        Ok(g.sigmoid(w))
    }

    /// Align both streams on the longer time axis, then mix rows as
    /// `hw (1 - w′) + hm w′`.
    pub fn fuse<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        hw: AdapterHidden,
        hm: AdapterHidden,
        fw: &EncoderFeatures,
        fm: &EncoderFeatures,
        gate: NodeId,
    ) -> Result<FusedHidden> {
        let (tw, tm) = (g.rows(hw.node), g.rows(hm.node));
        if tw != fw.len() || tm != fm.len() {
            return Err(dim_err("fuse", format!("hidden {tw}/{tm} vs features {}/{}", fw.len(), fm.len())));
        }
        let total = tw.max(tm);
        let mut blank_spectral = vec![false; total];
        let mut blank_waveform = vec![false; total];
        let (w_node, m_node) = if tm < tw {
            let pos = alignment_positions(fm, fw, self.cfg.placement);
            mark_blanks(&mut blank_waveform, &pos);
            (hw.node, g.place_rows(hm.node, &pos, total)?)
        } else if tw < tm {
            let pos = alignment_positions(fw, fm, self.cfg.placement);
            mark_blanks(&mut blank_spectral, &pos);
            (g.place_rows(hw.node, &pos, total)?, hm.node)
        } else {
            (hw.node, hm.node)
        };
        let node = g.mix(w_node, m_node, gate)?;
        Ok(FusedHidden { node, blank_spectral, blank_waveform })
    }

    /// Stride-2 convolution, GELU, dense map into the decoder space.
    pub fn project<F: Real>(&self, g: &mut Graph<'_, F>, h: NodeId) -> Result<NodeId> {
        let t = g.rows(h);
        if t < self.cfg.down_kernel {
            return Err(Error::Length { op: "project", got: t, need: self.cfg.down_kernel });
        }
        let e = self.down.forward(g, h)?;
        let e = g.gelu(e);
        self.proj.forward(g, e)
    }

    /// Per-frame logits over the vocabulary plus blank (last index).
    pub fn ctc_logits<F: Real>(&self, g: &mut Graph<'_, F>, h: NodeId) -> Result<NodeId> {
        self.ctc_head.forward(g, h)
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        fw: &EncoderFeatures,
        fm: Option<&EncoderFeatures>,
        routing: Routing,
    ) -> Result<ConnectorOutput> {
        let hw = self.adapt(g, fw, FeatureSource::Spectral)?;
        let (hm, lid, selected, gate, fused) = if self.cfg.variant.dual() {
            let fm = fm.ok_or_else(|| Error::Precondition("dual-encoder connector needs waveform features".into()))?;
            let hm = self.adapt(g, fm, FeatureSource::Waveform)?;
            let lid = self.predict_lid(g, hw, hm)?;
            let (selected, gnode) = if self.cfg.variant.gated() {
                let l = match routing {
                    Routing::Predicted => lid.predicted,
                    Routing::Language(l) => l,
                };
                (Some(l), self.select_gate(g, l)?)
            } else {
                (None, g.constant(Tensor::scalar(F::of(self.cfg.fixed_gate))))
            };
            let gv = g.scalar(gnode).as_f64();
            let fused = self.fuse(g, hw, hm, fw, fm, gnode)?;
            (Some(hm), Some(lid), selected, Some((gnode, gv)), fused)
        } else {
            let t = g.rows(hw.node);
            let fused = FusedHidden { node: hw.node, blank_spectral: vec![false; t], blank_waveform: vec![true; t] };
            (None, None, None, None, fused)
        };
        let speech = self.project(g, fused.node)?;
        let ctc_logits = if self.cfg.variant.ctc() { Some(self.ctc_logits(g, fused.node)?) } else { None };
        Ok(ConnectorOutput { hw, hm, lid, selected, gate, fused, speech, ctc_logits })
    }
}

fn mark_blanks(blank: &mut [bool], filled: &[usize]) {
    blank.iter_mut().for_each(|b| *b = true);
    for &p in filled {
        blank[p] = false;
    }
}

/// Rows of the longer stream that receive the shorter stream's frames.
/// Strictly increasing and within `[0, long.len())`.
pub fn alignment_positions(short: &EncoderFeatures, long: &EncoderFeatures, placement: BlankPlacement) -> Vec<usize> {
    let (n, total) = (short.len(), long.len());
    if placement == BlankPlacement::Tail || n == 0 {
        return (0..n).collect();
    }
    let mut pos: Vec<usize> = (0..n)
        .map(|k| {
            let j = libm::round((short.center_time(k) - long.offset) * long.frame_rate);
            (j.max(0.0) as usize).min(total - 1)
        })
        .collect();
    for k in 1..n {
        pos[k] = pos[k].max(pos[k - 1] + 1);
    }
    // pull back anything pushed past the end
    for k in (0..n).rev() {
        let cap = total - (n - k);
        pos[k] = pos[k].min(cap);
        if k + 1 < n {
            pos[k] = pos[k].min(pos[k + 1] - 1);
        }
    }
    pos
}
