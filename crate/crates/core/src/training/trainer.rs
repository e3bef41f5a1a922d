use alloc::format;
use alloc::vec::Vec;

use crate::connector::Routing;
use crate::corpus::{BatchStream, Split};
use crate::error::{Error, Result};
use crate::model::SpeechModel;
use crate::nn::{GradBuffer, Graph, ParamStore};
use crate::training::adam::{Adam, AdamConfig};
use crate::training::average::average_stores;
use crate::training::data::{FeatureCache, TaskData};
use crate::training::loss::{validate_weights, LossBundle};
use crate::training::schedule::{lr_at, TrainSchedule};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Language rebalancing exponent.
    pub gamma: f64,
    /// Utterances per micro-batch.
    pub batch_size: usize,
    pub schedule: TrainSchedule,
    /// Steps during which the gate is chosen by the true language.
    pub teacher_forcing_steps: u64,
    pub dev_every: u64,
    /// Dev utterances scored at each evaluation; 0 means all.
    pub dev_utterances: usize,
    pub keep_best: usize,
    pub clip_norm: f64,
    pub max_consecutive_skips: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.05,
            gamma: 0.5,
            batch_size: 4,
            schedule: TrainSchedule { peak_lr: 2e-3, warmup_steps: 300, total_steps: 3000, accumulation: 1, seed: 1 },
            teacher_forcing_steps: 500,
            dev_every: 250,
            dev_utterances: 0,
            keep_best: 5,
            clip_norm: 5.0,
            max_consecutive_skips: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_weights(self.alpha, self.beta)?;
        self.schedule.validate()?;
        if self.batch_size == 0 || self.keep_best == 0 || self.dev_every == 0 {
            return Err(Error::Config("batch size, keep-best and dev interval must be positive".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma {} must be >= 0", self.gamma)));
        }
        Ok(())
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub losses: LossBundle,
    pub lid_accuracy: Option<f64>,
    /// w′ per language after the update.
    pub gates: Vec<f64>,
    pub grad_norm: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DevRecord {
    pub step: u64,
    pub losses: LossBundle,
    pub lid_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct BestCheckpoint {
    pub step: u64,
    pub dev_loss: f64,
    pub store: ParamStore,
}

/// Mean loss parts over a set of utterances.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct BatchLosses {
    pub dec: f64,
    pub ctc: f64,
    pub lid: f64,
    pub all: f64,
    pub lid_correct: usize,
    pub lid_total: usize,
    pub count: usize,
}

impl BatchLosses {
    fn add(&mut self, o: &BatchLosses) {
        self.dec += o.dec;
        self.ctc += o.ctc;
        self.lid += o.lid;
        self.all += o.all;
        self.lid_correct += o.lid_correct;
        self.lid_total += o.lid_total;
        self.count += o.count;
    }

    /// Means per utterance. `l_all` is the mean of the weighted totals as
    /// trained, so terms a variant lacks do not count.
    pub fn bundle(&self, alpha: f64, beta: f64) -> LossBundle {
        let n = self.count.max(1) as f64;
        LossBundle { l_dec: self.dec / n, l_ctc: self.ctc / n, l_lid: self.lid / n, alpha, beta, l_all: self.all / n }
    }

    pub fn lid_accuracy(&self) -> Option<f64> {
        (self.lid_total > 0).then(|| self.lid_correct as f64 / self.lid_total as f64)
    }
}

/// Sum of per-utterance gradients and loss parts over `items`. Returns
/// `Ok(None)` for the gradient when any loss is non-finite.
pub fn batch_gradients(
    model: &SpeechModel,
    data: &TaskData,
    cache: &FeatureCache,
    items: &[usize],
    teacher: bool,
    alpha: f64,
    beta: f64,
    buf: &mut GradBuffer,
) -> Result<(bool, BatchLosses)> {
    let dual = model.connector.cfg.variant.dual();
    let mut acc = BatchLosses::default();
    let mut finite = true;
    for &i in items {
        let u = data.input(cache, i, dual)?;
        let routing = if teacher { Routing::Language(u.language) } else { Routing::Predicted };
        let mut g = Graph::new(&model.store);
        let l = model.utterance_loss(&mut g, &u, routing, alpha, beta)?;
        if !l.all_value.is_finite() {
            finite = false;
            continue;
        }
        g.backward(l.all, buf)?;
        acc.dec += l.dec;
        acc.ctc += l.ctc;
        acc.lid += l.lid;
        acc.all += l.all_value;
        if let Some(c) = l.lid_correct {
            acc.lid_total += 1;
            acc.lid_correct += c as usize;
        }
        acc.count += 1;
    }
    Ok((finite, acc))
}

/// Teacher-forced losses over `items` without gradients.
pub fn evaluate_losses(
    model: &SpeechModel,
    data: &TaskData,
    cache: &FeatureCache,
    items: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<BatchLosses> {
    let dual = model.connector.cfg.variant.dual();
    let mut acc = BatchLosses::default();
    for &i in items {
        let u = data.input(cache, i, dual)?;
        let mut g = Graph::new(&model.store);
        let l = model.utterance_loss(&mut g, &u, Routing::Predicted, alpha, beta)?;
        acc.add(&BatchLosses {
            dec: l.dec,
            ctc: l.ctc,
            lid: l.lid,
            all: l.all_value,
            lid_correct: l.lid_correct.unwrap_or(false) as usize,
            lid_total: l.lid_correct.is_some() as usize,
            count: 1,
        });
    }
    Ok(acc)
}

/// Evenly spaced subset of at most `limit` items (all when `limit` is 0).
pub fn spread(items: &[usize], limit: usize) -> Vec<usize> {
    if limit == 0 || items.len() <= limit {
        return items.to_vec();
    }
    (0..limit).map(|k| items[k * items.len() / limit]).collect()
}

/// Resumable state of a run besides the model parameters.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub step: u64,
    pub adam: Adam,
    pub consecutive_skips: u32,
    pub total_skips: u64,
    pub best: Vec<BestCheckpoint>,
}

pub struct Trainer<'d> {
    pub model: SpeechModel,
    data: &'d TaskData,
    cache: &'d FeatureCache,
    cfg: TrainConfig,
    adam: Adam,
    stream: BatchStream,
    dev: Vec<usize>,
    step: u64,
    consecutive_skips: u32,
    total_skips: u64,
    best: Vec<BestCheckpoint>,
}

impl<'d> Trainer<'d> {
    pub fn new(model: SpeechModel, data: &'d TaskData, cache: &'d FeatureCache, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let stream = BatchStream::new(data.by_language(Split::Train), cfg.batch_size, cfg.gamma, cfg.schedule.seed)?;
        let adam = Adam::new(&model.store, AdamConfig { clip_norm: cfg.clip_norm, ..AdamConfig::default() });
        let dev = spread(&data.split(Split::Dev), cfg.dev_utterances);
        Ok(Self { model, data, cache, cfg, adam, stream, dev, step: 0, consecutive_skips: 0, total_skips: 0, best: Vec::new() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn done(&self) -> bool {
        self.step >= self.cfg.schedule.total_steps
    }

    pub fn best(&self) -> &[BestCheckpoint] {
        &self.best
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            step: self.step,
            adam: self.adam.clone(),
            consecutive_skips: self.consecutive_skips,
            total_skips: self.total_skips,
            best: self.best.clone(),
        }
    }

    /// Continue from a saved state. The batch stream is replayed to the
    /// saved step so the following batches match an uninterrupted run.
    pub fn restore(&mut self, state: TrainerState) -> Result<()> {
        if state.adam.moments().0.len() != self.model.store.len() {
            return Err(Error::IncompatibleCheckpoint("optimizer state does not match the model".into()));
        }
        self.stream =
            BatchStream::new(self.data.by_language(Split::Train), self.cfg.batch_size, self.cfg.gamma, self.cfg.schedule.seed)?;
        for _ in 0..state.step * self.cfg.schedule.accumulation as u64 {
            self.stream.next_batch();
        }
        self.step = state.step;
        self.adam = state.adam;
        self.consecutive_skips = state.consecutive_skips;
        self.total_skips = state.total_skips;
        self.best = state.best;
        Ok(())
    }

    /// One optimizer update over `accumulation` micro-batches.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step + 1;
        let teacher = step <= self.cfg.teacher_forcing_steps;
        let mut buf = GradBuffer::for_store(&self.model.store);
        let mut acc = BatchLosses::default();
        let mut finite = true;
        for _ in 0..self.cfg.schedule.accumulation {
            let batch = self.stream.next_batch();
            let (ok, l) = batch_gradients(
                &self.model,
                self.data,
                self.cache,
                &batch.items,
                teacher,
                self.cfg.alpha,
                self.cfg.beta,
                &mut buf,
            )?;
            finite &= ok;
            acc.add(&l);
        }
        let lr = lr_at(step, &self.cfg.schedule);
        let mut grad_norm = f64::NAN;
        finite &= acc.count > 0 && buf.is_finite();
        if finite {
            buf.scale(1.0 / acc.count as f32);
            grad_norm = self.adam.step(&mut self.model.store, &buf, lr)?;
            self.consecutive_skips = 0;
        } else {
            self.consecutive_skips += 1;
            self.total_skips += 1;
            if self.consecutive_skips > self.cfg.max_consecutive_skips {
                return Err(Error::Aborted(format!(
                    "{} consecutive steps with non-finite loss (step {step})",
                    self.consecutive_skips
                )));
            }
        }
        self.step = step;
        let losses = acc.bundle(self.cfg.alpha, self.cfg.beta);
        let gates = self.model.connector.gate_table(&self.model.store).into_iter().map(|g| g.1).collect();
        Ok(StepRecord { step, lr, losses, lid_accuracy: acc.lid_accuracy(), gates, grad_norm, skipped: !finite })
    }

    pub fn evaluate_dev(&self) -> Result<DevRecord> {
        let acc = evaluate_losses(&self.model, self.data, self.cache, &self.dev, self.cfg.alpha, self.cfg.beta)?;
        Ok(DevRecord { step: self.step, losses: acc.bundle(self.cfg.alpha, self.cfg.beta), lid_accuracy: acc.lid_accuracy() })
    }

    /// Keep the current parameters if they rank among the best by dev loss.
    /// Returns whether they were kept.
    pub fn offer_best(&mut self, dev: &DevRecord) -> bool {
        let loss = dev.losses.l_all;
        if !loss.is_finite() {
            return false;
        }
        let full = self.best.len() >= self.cfg.keep_best;
        if full && self.best.iter().all(|b| b.dev_loss <= loss) {
            return false;
        }
        self.best.push(BestCheckpoint { step: dev.step, dev_loss: loss, store: self.model.store.clone() });
        self.best.sort_by(|a, b| a.dev_loss.total_cmp(&b.dev_loss).then(a.step.cmp(&b.step)));
        self.best.truncate(self.cfg.keep_best);
        true
    }

    pub fn is_dev_step(&self) -> bool {
        self.step % self.cfg.dev_every == 0 || self.done()
    }

    /// Final model: the mean of the kept checkpoints, or the current
    /// parameters when none were kept.
    pub fn finish(mut self) -> Result<(SpeechModel, Vec<BestCheckpoint>)> {
        if !self.best.is_empty() {
            let stores: Vec<&ParamStore> = self.best.iter().map(|b| &b.store).collect();
            self.model.store = average_stores(&stores)?;
        }
        Ok((self.model, self.best))
    }
}

/// Progress events emitted by [`train`].
pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Dev(&'a DevRecord, &'a Trainer<'a>),
}

/// Run to the configured step count, evaluating on dev and keeping the
/// best checkpoints along the way.
pub fn train<'d>(
    mut trainer: Trainer<'d>,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<(SpeechModel, Vec<BestCheckpoint>)> {
    while !trainer.done() {
        let rec = trainer.train_step()?;
        on_event(TrainEvent::Step(&rec))?;
        if trainer.is_dev_step() {
            let dev = trainer.evaluate_dev()?;
            trainer.offer_best(&dev);
            on_event(TrainEvent::Dev(&dev, &trainer))?;
        }
    }
    trainer.finish()
}
