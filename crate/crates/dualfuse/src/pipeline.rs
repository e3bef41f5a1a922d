//! End-to-end steps shared by the command-line tools and the experiment
//! runners: corpus generation and loading, pretraining of the frozen parts,
//! training with checkpoints and resume, and model loading.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dualfuse_core::corpus::{generate_corpus, language_specs, Corpus, LanguageSpec, Split, Translation, UtteranceRecord};
use dualfuse_core::decoder::{pretrain_decoder, DecoderLm, LmPretrainReport};
use dualfuse_core::encoders::{pretrain_encoders, DualEncoder, PretrainReport};
use dualfuse_core::model::SpeechModel;
use dualfuse_core::nn::ParamStore;
use dualfuse_core::rng;
use dualfuse_core::training::trainer::{evaluate_losses, spread};
use dualfuse_core::training::{
    Adam, AdamConfig, BestCheckpoint, DevRecord, FeatureCache, TaskData, Trainer, TrainerState,
};
use dualfuse_core::vocab::Vocab;
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointKind, OptimizerState, Provenance};
use crate::config::{streams, RunConfig};
use crate::error::{FormatError, Result};
use crate::fsutil::{create_dir, is_empty_dir, write_atomic};
use crate::manifest::{read_manifest, write_manifest, ManifestRow};
use crate::metrics::{LogRecord, MetricLog};
use crate::vocab_file::{read_vocab, write_vocab};
use crate::wav::{read_wav, write_wav};

pub const MANIFEST: &str = "manifest.tsv";
pub const VOCAB: &str = "vocab.txt";
pub const CORPUS_CONFIG: &str = "corpus.cfg";
pub const ENCODERS: &str = "encoders.ckpt";
pub const DECODER: &str = "decoder.ckpt";
pub const LAST: &str = "last.ckpt";
pub const FINAL: &str = "final.ckpt";
pub const METRICS: &str = "metrics.jsonl";
pub const RUN_CONFIG: &str = "run.cfg";

pub fn languages(cfg: &RunConfig) -> Result<Vec<LanguageSpec>> {
    Ok(language_specs(cfg.languages, cfg.stream_seed(streams::CORPUS))?)
}

pub fn generate(cfg: &RunConfig) -> Result<Corpus> {
    Ok(generate_corpus(languages(cfg)?, cfg.corpus_sizes(), cfg.reordering, cfg.stream_seed(streams::CORPUS))?)
}

pub fn vocab_for(languages: &[LanguageSpec]) -> Result<Vocab> {
    let names: Vec<&str> = languages.iter().map(|l| l.name.as_str()).collect();
    Ok(Vocab::build(&names)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSummary {
    /// (language, split) -> utterance count
    pub counts: BTreeMap<(String, String), usize>,
    pub total_seconds: f64,
    /// SHA-256 over the manifest and every audio file, in manifest order.
    pub checksum: String,
}

fn audio_rel(rec: &UtteranceRecord) -> PathBuf {
    PathBuf::from("wav").join(format!("{}.wav", rec.id))
}

/// Render the corpus to `dir`: WAV files, manifest, vocabulary and the
/// generating configuration.
pub fn write_corpus(dir: &Path, cfg: &RunConfig, force: bool) -> Result<CorpusSummary> {
    if !force && !is_empty_dir(dir)? {
        return Err(FormatError::NotEmpty(dir.to_path_buf()));
    }
    if force && dir.join("wav").exists() {
        std::fs::remove_dir_all(dir.join("wav")).map_err(|e| FormatError::io(dir, e))?;
    }
    create_dir(&dir.join("wav"))?;
    let corpus = generate(cfg)?;
    let mut rows = Vec::with_capacity(corpus.records.len());
    for rec in &corpus.records {
        let rel = audio_rel(rec);
        write_wav(&dir.join(&rel), &corpus.render(rec)?)?;
        rows.push(ManifestRow {
            id: rec.id.clone(),
            language: corpus.languages[rec.language].name.clone(),
            split: rec.split,
            duration: rec.duration,
            audio: rel,
            transcript: rec.transcript.clone(),
            tgt_language: rec.translation.as_ref().map(|t| corpus.languages[t.language].name.clone()),
            translation: rec.translation.as_ref().map(|t| t.text.clone()),
        });
    }
    write_manifest(&dir.join(MANIFEST), &rows)?;
    write_vocab(&dir.join(VOCAB), &vocab_for(&corpus.languages)?)?;
    write_atomic(&dir.join(CORPUS_CONFIG), cfg.to_text().as_bytes())?;
    summarize(dir, &rows)
}

pub fn summarize(dir: &Path, rows: &[ManifestRow]) -> Result<CorpusSummary> {
    let mut counts = BTreeMap::new();
    let mut total_seconds = 0.0;
    let mut h = Sha256::new();
    let manifest = dir.join(MANIFEST);
    h.update(std::fs::read(&manifest).map_err(|e| FormatError::io(&manifest, e))?);
    for r in rows {
        *counts.entry((r.language.clone(), r.split.as_str().to_string())).or_insert(0) += 1;
        total_seconds += r.duration;
        let p = dir.join(&r.audio);
        h.update(std::fs::read(&p).map_err(|e| FormatError::io(&p, e))?);
    }
    Ok(CorpusSummary { counts, total_seconds, checksum: hex::encode(h.finalize()) })
}

/// A corpus read back from disk, with its audio file paths.
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub vocab: Vocab,
    /// Configuration the corpus was generated with.
    pub config: RunConfig,
    pub audio: Vec<PathBuf>,
}

impl LoadedCorpus {
    pub fn features(&self, enc: &DualEncoder, splits: &[Split]) -> Result<FeatureCache> {
        let mut err = None;
        let cache = FeatureCache::build_with(&self.corpus, enc, splits, |i, _| match read_wav(&self.audio[i]) {
            Ok(w) => Ok(w),
            Err(e) => {
                let msg = e.to_string();
                err = Some(e);
                Err(dualfuse_core::Error::Precondition(msg))
            }
        });
        match (cache, err) {
            (Ok(c), _) => Ok(c),
            (Err(_), Some(e)) => Err(e),
            (Err(e), None) => Err(e.into()),
        }
    }
}

pub fn load_corpus(dir: &Path) -> Result<LoadedCorpus> {
    let manifest = dir.join(MANIFEST);
    if !manifest.exists() {
        return Err(FormatError::io(&manifest, std::io::Error::new(std::io::ErrorKind::NotFound, "no corpus manifest")));
    }
    let config = RunConfig::load(&dir.join(CORPUS_CONFIG))?;
    let vocab = read_vocab(&dir.join(VOCAB))?;
    let languages = languages(&config)?;
    let index: BTreeMap<&str, usize> = languages.iter().map(|l| (l.name.as_str(), l.id)).collect();
    let lang = |name: &str, line: usize| {
        index.get(name).copied().ok_or_else(|| FormatError::malformed(&manifest, "manifest", format!("row {line}: unknown language {name:?}")))
    };
    let rows = read_manifest(&manifest)?;
    let mut records = Vec::with_capacity(rows.len());
    let mut audio = Vec::with_capacity(rows.len());
    for (i, r) in rows.into_iter().enumerate() {
        let translation = match (&r.tgt_language, &r.translation) {
            (Some(l), Some(t)) => Some(Translation { language: lang(l, i + 2)?, text: t.clone() }),
            _ => None,
        };
        records.push(UtteranceRecord {
            id: r.id,
            language: lang(&r.language, i + 2)?,
            split: r.split,
            transcript: r.transcript,
            translation,
            seed: 0,
            duration: r.duration,
        });
        audio.push(if r.audio.is_absolute() { r.audio } else { dir.join(r.audio) });
    }
    let corpus = Corpus { languages, records, reordering: config.reordering };
    Ok(LoadedCorpus { corpus, vocab, config, audio })
}

/// Encoders and decoder weights that stay fixed during connector training.
#[derive(Clone, Debug)]
pub struct Frozen {
    pub encoders: DualEncoder,
    pub decoder: ParamStore,
}

#[derive(Clone, Debug)]
pub struct FrozenReport {
    pub encoders: Option<PretrainReport>,
    pub decoder: LmPretrainReport,
}

pub fn new_encoders(cfg: &RunConfig) -> Result<DualEncoder> {
    Ok(DualEncoder::new(cfg.encoder_config(), cfg.stream_seed(streams::ENCODER_INIT))?)
}

pub fn pretrain_frozen(cfg: &RunConfig, corpus: &Corpus, vocab: &Vocab) -> Result<(Frozen, FrozenReport)> {
    let mut encoders = new_encoders(cfg)?;
    let enc_report = if cfg.encoder_steps > 0 { Some(pretrain_encoders(&mut encoders, corpus, &cfg.encoder_pretrain())?) } else { None };
    let mut decoder = ParamStore::new();
    let lm = DecoderLm::new(&mut decoder, cfg.decoder_config(), vocab, &mut rng::rng(cfg.stream_seed(streams::DECODER_INIT)))?;
    let dec_report = pretrain_decoder(&mut decoder, &lm, &corpus.languages, corpus.reordering, vocab, &cfg.lm_pretrain())?;
    Ok((Frozen { encoders, decoder }, FrozenReport { encoders: enc_report, decoder: dec_report }))
}

fn provenance(step: u64) -> Provenance {
    Provenance { step, dev_loss: None, parent: None }
}

pub fn encoders_checkpoint(cfg: &RunConfig, enc: &DualEncoder) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Encoders,
        pretrained: Some(enc.pretrained),
        config: cfg.to_text(),
        vocab: Vec::new(),
        params: enc.store.clone(),
        provenance: provenance(if enc.pretrained { cfg.encoder_steps as u64 } else { 0 }),
        optimizer: None,
    }
}

pub fn decoder_checkpoint(cfg: &RunConfig, vocab: &Vocab, store: &ParamStore) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Decoder,
        pretrained: None,
        config: cfg.to_text(),
        vocab: vocab.tokens().to_vec(),
        params: store.clone(),
        provenance: provenance(cfg.lm_steps as u64),
        optimizer: None,
    }
}

fn incompatible(msg: String) -> FormatError {
    FormatError::Core(dualfuse_core::Error::IncompatibleCheckpoint(msg))
}

/// Copy every parameter of `src` into `dst`; names and shapes must agree
/// exactly.
fn assign_all(dst: &mut ParamStore, src: &ParamStore, path: &Path) -> Result<()> {
    if !dst.same_layout(src) {
        let want: Vec<String> = dst.iter().map(|(_, p)| format!("{}{:?}", p.name, p.value.shape())).collect();
        let got: Vec<String> = src.iter().map(|(_, p)| format!("{}{:?}", p.name, p.value.shape())).collect();
        let first = want.iter().zip(&got).find(|(a, b)| a != b);
        return Err(incompatible(format!(
            "{}: parameter layout differs from the configured model ({} vs {} tensors{})",
            path.display(),
            got.len(),
            want.len(),
            first.map(|(a, b)| format!(", e.g. {b} vs {a}")).unwrap_or_default()
        )));
    }
    for ((_, s), d) in src.iter().zip(dst.iter_mut()) {
        d.value = s.value.clone();
        d.trainable = s.trainable;
    }
    Ok(())
}

pub fn load_encoders(path: &Path) -> Result<(DualEncoder, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(CheckpointKind::Encoders, path)?;
    let cfg = RunConfig::from_text(&ck.config)?;
    let mut enc = new_encoders(&cfg)?;
    assign_all(&mut enc.store, &ck.params, path)?;
    enc.pretrained = ck.pretrained.unwrap_or(false);
    Ok((enc, cfg))
}

pub fn load_decoder(path: &Path, vocab: &Vocab) -> Result<ParamStore> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(CheckpointKind::Decoder, path)?;
    if ck.vocab != vocab.tokens() {
        return Err(incompatible(format!("{}: decoder vocabulary differs from the corpus", path.display())));
    }
    Ok(ck.params)
}

/// Fresh model with the pretrained decoder loaded.
pub fn build_model(cfg: &RunConfig, vocab: &Vocab, decoder: &ParamStore) -> Result<SpeechModel> {
    let mut m = SpeechModel::new(cfg.model_config(), vocab.clone(), cfg.stream_seed(streams::MODEL_INIT))?;
    m.load_decoder(decoder)?;
    if cfg.decoder_trainable {
        m.store.set_trainable("decoder.", true);
    }
    Ok(m)
}

pub fn model_checkpoint(
    cfg: &RunConfig,
    model: &SpeechModel,
    provenance: Provenance,
    optimizer: Option<OptimizerState>,
) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Model,
        pretrained: None,
        config: cfg.to_text(),
        vocab: model.vocab.tokens().to_vec(),
        params: model.store.clone(),
        provenance,
        optimizer,
    }
}

/// Rebuild a model from its checkpoint.
pub fn load_model(path: &Path) -> Result<(SpeechModel, RunConfig, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(CheckpointKind::Model, path)?;
    let cfg = RunConfig::from_text(&ck.config)?;
    let vocab = Vocab::from_tokens(ck.vocab.clone())?;
    let mut model = SpeechModel::new(cfg.model_config(), vocab, cfg.stream_seed(streams::MODEL_INIT))?;
    assign_all(&mut model.store, &ck.params, path)?;
    Ok((model, cfg, ck))
}

/// Where and how a training run keeps its files.
#[derive(Clone, Debug, Default)]
pub struct RunFiles {
    pub dir: Option<PathBuf>,
    /// Continue from `dir/last.ckpt` when present.
    pub resume: bool,
    /// Stop (without averaging) once this step is reached.
    pub stop_after: Option<u64>,
    /// Id of the checkpoint the run was initialized from.
    pub parent: Option<String>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Averaged model, or the current one when the run stopped early.
    pub model: SpeechModel,
    pub best: Vec<(u64, f64)>,
    pub log: Vec<LogRecord>,
    /// Dev losses of the returned model.
    pub final_dev: Option<DevRecord>,
    pub finished: bool,
    pub resumed_from: Option<u64>,
}

fn best_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("best-{step:07}.ckpt"))
}

fn sync_best(dir: &Path, cfg: &RunConfig, best: &[BestCheckpoint], vocab: &Vocab, template: &SpeechModel) -> Result<()> {
    let keep: Vec<PathBuf> = best.iter().map(|b| best_path(dir, b.step)).collect();
    for entry in std::fs::read_dir(dir).map_err(|e| FormatError::io(dir, e))? {
        let p = entry.map_err(|e| FormatError::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("best-") && name.ends_with(".ckpt") && !keep.contains(&p) {
            std::fs::remove_file(&p).map_err(|e| FormatError::io(&p, e))?;
        }
    }
    for (b, p) in best.iter().zip(&keep) {
        if !p.exists() {
            let ck = Checkpoint {
                kind: CheckpointKind::Model,
                pretrained: None,
                config: cfg.to_text(),
                vocab: vocab.tokens().to_vec(),
                params: b.store.clone(),
                provenance: Provenance { step: b.step, dev_loss: Some(b.dev_loss), parent: None },
                optimizer: None,
            };
            debug_assert!(template.store.same_layout(&ck.params));
            ck.save(p)?;
        }
    }
    Ok(())
}

fn load_best(dir: &Path) -> Result<Vec<BestCheckpoint>> {
    let mut best = Vec::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| FormatError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("best-") && n.ends_with(".ckpt")))
        .collect();
    paths.sort();
    for p in paths {
        let ck = Checkpoint::load(&p)?;
        let dev_loss = ck.provenance.dev_loss.ok_or_else(|| FormatError::malformed(&p, "checkpoint", "best snapshot without dev loss"))?;
        best.push(BestCheckpoint { step: ck.provenance.step, dev_loss, store: ck.params });
    }
    best.sort_by(|a, b| a.dev_loss.total_cmp(&b.dev_loss).then(a.step.cmp(&b.step)));
    Ok(best)
}

fn save_last(dir: &Path, cfg: &RunConfig, trainer: &Trainer<'_>, parent: Option<String>) -> Result<()> {
    let st = trainer.state();
    let (m, v) = st.adam.moments();
    let opt = OptimizerState {
        t: st.adam.steps(),
        consecutive_skips: st.consecutive_skips,
        total_skips: st.total_skips,
        m: m.to_vec(),
        v: v.to_vec(),
    };
    let prov = Provenance { step: st.step, dev_loss: st.best.first().map(|b| b.dev_loss), parent };
    model_checkpoint(cfg, &trainer.model, prov, Some(opt)).save(&dir.join(LAST))
}

/// Train the connector on `data`. With `files.dir` set, the metric log,
/// best snapshots, `last.ckpt` (each dev evaluation) and `final.ckpt` are
/// written there.
pub fn run_training(
    cfg: &RunConfig,
    model: SpeechModel,
    data: &TaskData,
    cache: &FeatureCache,
    files: &RunFiles,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<RunOutcome> {
    let tc = cfg.train_config();
    let mut trainer = Trainer::new(model, data, cache, tc)?;
    let languages = trainer.model.vocab.language_names().to_vec();
    let vocab = trainer.model.vocab.clone();
    let mut resumed_from = None;
    if let Some(dir) = &files.dir {
        create_dir(dir)?;
        let last = dir.join(LAST);
        if files.resume && last.exists() {
            let ck = Checkpoint::load(&last)?;
            ck.expect_kind(CheckpointKind::Model, &last)?;
            let saved = RunConfig::from_text(&ck.config)?;
            if saved != *cfg {
                return Err(FormatError::Config(format!("{} was written with a different configuration", last.display())));
            }
            assign_all(&mut trainer.model.store, &ck.params, &last)?;
            let o = ck.optimizer.ok_or_else(|| FormatError::malformed(&last, "checkpoint", "no optimizer state"))?;
            let adam = Adam::from_state(AdamConfig { clip_norm: cfg.clip_norm, ..AdamConfig::default() }, o.t, o.m, o.v)?;
            trainer.restore(TrainerState {
                step: ck.provenance.step,
                adam,
                consecutive_skips: o.consecutive_skips,
                total_skips: o.total_skips,
                best: load_best(dir)?,
            })?;
            resumed_from = Some(ck.provenance.step);
        } else {
            for entry in std::fs::read_dir(dir).map_err(|e| FormatError::io(dir, e))? {
                let p = entry.map_err(|e| FormatError::io(dir, e))?.path();
                let n = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if (n.starts_with("best-") && n.ends_with(".ckpt")) || n == LAST || n == FINAL {
                    std::fs::remove_file(&p).map_err(|e| FormatError::io(&p, e))?;
                }
            }
        }
        write_atomic(&dir.join(RUN_CONFIG), cfg.to_text().as_bytes())?;
    }
    let mut log_file = match &files.dir {
        Some(dir) => Some(MetricLog::open(&dir.join(METRICS), resumed_from)?),
        None => None,
    };
    let mut log = Vec::new();
    let mut emit = |r: LogRecord, log_file: &mut Option<MetricLog>| -> Result<()> {
        if let Some(f) = log_file {
            f.append(&r)?;
        }
        on_record(&r);
        log.push(r);
        Ok(())
    };
    let mut stopped = false;
    while !trainer.done() {
        let rec = trainer.train_step()?;
        emit(LogRecord::from_step(&rec, &languages), &mut log_file)?;
        let dev_step = trainer.is_dev_step();
        if dev_step {
            let dev = trainer.evaluate_dev()?;
            let kept = trainer.offer_best(&dev);
            emit(LogRecord::from_dev(&dev, kept), &mut log_file)?;
            if let Some(dir) = &files.dir {
                sync_best(dir, cfg, trainer.best(), &vocab, &trainer.model)?;
                save_last(dir, cfg, &trainer, files.parent.clone())?;
            }
        }
        if files.stop_after.is_some_and(|s| trainer.step_count() >= s) && !trainer.done() {
            if let (Some(dir), false) = (&files.dir, dev_step) {
                save_last(dir, cfg, &trainer, files.parent.clone())?;
            }
            stopped = true;
            break;
        }
    }
    if stopped {
        return Ok(RunOutcome {
            best: trainer.best().iter().map(|b| (b.step, b.dev_loss)).collect(),
            model: trainer.model,
            log,
            final_dev: None,
            finished: false,
            resumed_from,
        });
    }
    let step = trainer.step_count();
    let (model, best) = trainer.finish()?;
    let dev_items = spread(&data.split(Split::Dev), cfg.dev_subset);
    let acc = evaluate_losses(&model, data, cache, &dev_items, cfg.alpha, cfg.beta)?;
    let final_dev = DevRecord { step, losses: acc.bundle(cfg.alpha, cfg.beta), lid_accuracy: acc.lid_accuracy() };
    if let Some(dir) = &files.dir {
        let prov = Provenance { step, dev_loss: Some(final_dev.losses.l_all), parent: files.parent.clone() };
        model_checkpoint(cfg, &model, prov, None).save(&dir.join(FINAL))?;
    }
    Ok(RunOutcome {
        model,
        best: best.iter().map(|b| (b.step, b.dev_loss)).collect(),
        log,
        final_dev: Some(final_dev),
        finished: true,
        resumed_from,
    })
}
