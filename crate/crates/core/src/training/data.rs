use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::audio::Waveform;
use crate::corpus::{acoustic_tokens, Corpus, Split, UtteranceRecord};
use crate::encoders::{DualEncoder, EncoderFeatures};
use crate::error::{Error, Result};
use crate::model::UtteranceInput;
use crate::rng;
use crate::vocab::{task_labels, PromptTemplate, Task, Vocab};

/// Encoder outputs for the records of a corpus, computed once because the
/// encoders never change.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureCache {
    feats: Vec<Option<(EncoderFeatures, EncoderFeatures)>>,
}

impl FeatureCache {
    pub fn build(corpus: &Corpus, enc: &DualEncoder, splits: &[Split]) -> Result<Self> {
        Self::build_with(corpus, enc, splits, |_, rec| corpus.render(rec))
    }

    /// As [`FeatureCache::build`], with audio supplied by `load`.
    pub fn build_with(
        corpus: &Corpus,
        enc: &DualEncoder,
        splits: &[Split],
        mut load: impl FnMut(usize, &UtteranceRecord) -> Result<Waveform>,
    ) -> Result<Self> {
        let mut feats = vec![None; corpus.records.len()];
        for (i, rec) in corpus.records.iter().enumerate() {
            if splits.contains(&rec.split) {
                let w = load(i, rec)?;
                feats[i] = Some(enc.encode(&w)?);
            }
        }
        Ok(Self { feats })
    }

    pub fn get(&self, record: usize) -> Result<&(EncoderFeatures, EncoderFeatures)> {
        self.feats
            .get(record)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Precondition(alloc::format!("no cached features for record {record}")))
    }

    pub fn len(&self) -> usize {
        self.feats.iter().filter(|f| f.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Add Gaussian noise of standard deviation `std` to the waveform
    /// features of every cached record of `language`.
    pub fn corrupt_waveform(&mut self, corpus: &Corpus, language: usize, std: f64, seed: u64) {
        for (i, f) in self.feats.iter_mut().enumerate() {
            if corpus.records[i].language != language {
                continue;
            }
            if let Some((_, m)) = f {
                let mut r = rng::derive(seed, i as u64);
                for v in m.frames.data_mut() {
                    *v += (std * rng::normal(&mut r)) as f32;
                }
            }
        }
    }
}

/// Token-level inputs and references of one record for a given task.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedUtterance {
    pub record: usize,
    pub language: usize,
    pub split: Split,
    pub prompt: Vec<usize>,
    pub labels: Vec<usize>,
    pub ctc_target: Vec<usize>,
    pub transcript: String,
    pub translation: Option<(usize, String)>,
}

/// Every record of a corpus prepared for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task: Task,
    pub languages: usize,
    pub utterances: Vec<PreparedUtterance>,
}

impl TaskData {
    pub fn prepare(corpus: &Corpus, vocab: &Vocab, task: Task) -> Result<Self> {
        let mut utterances = Vec::with_capacity(corpus.records.len());
        for (i, rec) in corpus.records.iter().enumerate() {
            let translation = rec.translation.as_ref().map(|t| (t.language, t.text.clone()));
            if task.needs_translation() && translation.is_none() {
                return Err(Error::Precondition(alloc::format!("record {} has no translation", rec.id)));
            }
            let target = translation.as_ref().map(|t| t.0);
            let prompt = PromptTemplate::render(task, target, vocab)?.tokens;
            let labels = task_labels(task, &rec.transcript, translation.as_ref().map(|t| t.1.as_str()), vocab)?;
            let source: String = acoustic_tokens(&rec.transcript).into_iter().collect();
            let ctc_target = vocab.encode_text(&source)?;
            utterances.push(PreparedUtterance {
                record: i,
                language: rec.language,
                split: rec.split,
                prompt,
                labels,
                ctc_target,
                transcript: rec.transcript.clone(),
                translation,
            });
        }
        Ok(Self { task, languages: corpus.languages.len(), utterances })
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        self.utterances.iter().filter(|u| u.split == split).map(|u| u.record).collect()
    }

    /// Record indices of a split grouped by language.
    pub fn by_language(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.languages];
        for u in self.utterances.iter().filter(|u| u.split == split) {
            out[u.language].push(u.record);
        }
        out
    }

    pub fn input<'a>(&'a self, cache: &'a FeatureCache, record: usize, dual: bool) -> Result<UtteranceInput<'a>> {
        let u = &self.utterances[record];
        let (s, m) = cache.get(record)?;
        Ok(UtteranceInput {
            spectral: s,
            waveform: if dual { Some(m) } else { None },
            language: u.language,
            prompt: &u.prompt,
            labels: &u.labels,
            ctc_target: &u.ctc_target,
        })
    }

    /// Reference text the decoder should produce.
    pub fn reference(&self, record: usize) -> &str {
        let u = &self.utterances[record];
        match (self.task, &u.translation) {
            (Task::Asr, _) | (_, None) => &u.transcript,
            (_, Some((_, t))) => t,
        }
    }
}
