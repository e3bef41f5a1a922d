//! Command-line interface. Every command ends with one status line on
//! stdout: `status=ok command=<name> key=value ...` or
//! `status=error command=<name> error="..."`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dualfuse_core::corpus::Split;
use dualfuse_core::eval::{evaluate, gate_report, language_separation, EvalReport, UtteranceResult};
use dualfuse_core::nn::gradsuite::run_suite;
use dualfuse_core::nn::{GradCheckOptions, ParamStore};
use dualfuse_core::training::average_stores;
use dualfuse_core::training::{FeatureCache, TaskData};
use dualfuse_core::vocab::Task;

use crate::checkpoint::{Checkpoint, Provenance};
use crate::config::RunConfig;
use crate::error::{FormatError, Result};
use crate::fsutil::{create_dir, write_atomic};
use crate::metrics::LogRecord;
use crate::pipeline::{self, RunFiles};
use crate::report;

#[derive(Parser, Debug)]
#[command(name = "dualfuse", version, about = "Dual-encoder speech-to-text on a synthetic multilingual corpus")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// Configuration file of key=value lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Directory for checkpoints, logs and reports.
    #[arg(long, env = "DUALFUSE_OUTPUT_DIR", global = true)]
    pub output_dir: Option<PathBuf>,
    /// Master random seed.
    #[arg(long, env = "DUALFUSE_SEED", global = true)]
    pub seed: Option<u64>,
    /// Directory of the generated corpus.
    #[arg(long, global = true)]
    pub corpus_dir: Option<PathBuf>,
    /// Print the effective configuration before running.
    #[arg(long, global = true)]
    pub dump_config: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus: WAV files, manifest and vocabulary.
    GenData {
        #[arg(long)]
        languages: Option<usize>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain and freeze the encoders and the text decoder.
    PretrainEncoders {
        /// Keep random encoder weights.
        #[arg(long)]
        random_encoders: bool,
    },
    /// Train the connector.
    Train(TrainArgs),
    /// Decode a split and score it.
    Eval {
        /// Model checkpoint (default: <output-dir>/final.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "dev")]
        split: String,
        /// Required task; must match the checkpoint's.
        #[arg(long)]
        task: Option<String>,
        /// Score `id<TAB>hypothesis` lines instead of decoding.
        #[arg(long)]
        hypotheses: Option<PathBuf>,
        /// Directory holding encoders.ckpt (default: output dir).
        #[arg(long)]
        frozen: Option<PathBuf>,
    },
    /// Gate and embedding-separation reports for one or two checkpoints.
    Analyze {
        #[arg(long = "checkpoint", required = true, num_args = 1..=2)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value = "dev")]
        split: String,
        #[arg(long)]
        frozen: Option<PathBuf>,
    },
    /// Average the parameters of several model checkpoints.
    AvgCkpt {
        #[arg(long)]
        output: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Finite-difference gradient checks of every differentiable operation.
    GradCheck {
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// asr, ast or ast-cot.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// full, no-ws, single or single-no-ctc.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Initialize every parameter from a model checkpoint.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    /// Continue from <output-dir>/last.ckpt.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this step, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<u64>,
    /// Directory holding encoders.ckpt and decoder.ckpt (default: output dir).
    #[arg(long)]
    pub frozen: Option<PathBuf>,
    /// Print a progress line every N steps (0 = never).
    #[arg(long, default_value_t = 100)]
    pub progress: u64,
}

/// Configuration from defaults, then the file, then flags.
pub fn resolve_config(g: &Global, extra: &[(&str, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &g.config {
        let text = std::fs::read_to_string(p).map_err(|e| FormatError::io(p, e))?;
        cfg.apply_text(&text)?;
    }
    for kv in &g.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| FormatError::Config(format!("--set {kv:?}: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(d) = &g.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(d) = &g.corpus_dir {
        cfg.corpus_dir = d.clone();
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    for (k, v) in extra {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Collected `key=value` pairs for the status line.
#[derive(Default)]
pub struct Status(Vec<(String, String)>);

impl Status {
    pub fn put(&mut self, k: &str, v: impl ToString) {
        self.0.push((k.to_string(), v.to_string()));
    }

    pub fn line(&self, command: &str) -> String {
        let mut s = format!("status=ok command={command}");
        for (k, v) in &self.0 {
            let _ = write!(s, " {k}={}", quote(v));
        }
        s
    }
}

fn quote(v: &str) -> String {
    if !v.is_empty() && !v.contains([' ', '"', '=', '\t', '\n']) {
        v.to_string()
    } else {
        format!("{:?}", v)
    }
}

pub fn error_line(command: &str, err: &str) -> String {
    format!("status=error command={command} error={}", quote(&err.replace('\n', " ")))
}

impl Cli {
    pub fn command_names() -> Vec<String> {
        use clap::CommandFactory;
        Cli::command().get_subcommands().map(|c| c.get_name().to_string()).collect()
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::PretrainEncoders { .. } => "pretrain-encoders",
            Command::Train(_) => "train",
            Command::Eval { .. } => "eval",
            Command::Analyze { .. } => "analyze",
            Command::AvgCkpt { .. } => "avg-ckpt",
            Command::GradCheck { .. } => "grad-check",
        }
    }
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(Split::parse(s)?)
}

fn frozen_dir(cfg: &RunConfig, frozen: &Option<PathBuf>) -> PathBuf {
    frozen.clone().unwrap_or_else(|| cfg.output_dir.clone())
}

fn features(
    corpus: &pipeline::LoadedCorpus,
    frozen: &Path,
    cfg: &RunConfig,
    splits: &[Split],
) -> Result<FeatureCache> {
    let (enc, enc_cfg) = pipeline::load_encoders(&frozen.join(pipeline::ENCODERS))?;
    if enc_cfg.encoder_config() != cfg.encoder_config() {
        return Err(FormatError::Core(dualfuse_core::Error::IncompatibleCheckpoint(
            "encoder checkpoint dimensions differ from the configuration".into(),
        )));
    }
    corpus.features(&enc, splits)
}

fn check_corpus_matches(cfg: &RunConfig, corpus: &pipeline::LoadedCorpus) -> Result<()> {
    if corpus.vocab.language_names().len() != cfg.languages {
        return Err(FormatError::Config(format!(
            "corpus has {} languages, configuration says {}",
            corpus.vocab.language_names().len(),
            cfg.languages
        )));
    }
    Ok(())
}

/// Run one command; returns the status pairs.
pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<Status> {
    let mut st = Status::default();
    let say = |out: &mut dyn std::io::Write, s: &str| {
        let _ = out.write_all(s.as_bytes());
        let _ = out.flush();
    };
    match &cli.command {
        Command::GenData { languages, force } => {
            let mut extra = Vec::new();
            if let Some(n) = languages {
                extra.push(("languages", n.to_string()));
            }
            let cfg = resolve_config(&cli.global, &extra)?;
            if cli.global.dump_config {
                say(out, &cfg.to_text());
            }
            let dir = cfg.corpus_dir.clone();
            let sum = pipeline::write_corpus(&dir, &cfg, *force)?;
            let mut table = String::from("language     split  utterances\n");
            let mut per_lang = BTreeMap::new();
            for ((l, s), n) in &sum.counts {
                let _ = writeln!(table, "{l:<12} {s:<6} {n:>10}");
                *per_lang.entry(l.clone()).or_insert(0) += n;
            }
            say(out, &table);
            st.put("dir", dir.display());
            st.put("languages", per_lang.len());
            st.put("utterances", sum.counts.values().sum::<usize>());
            st.put("hours", format!("{:.3}", sum.total_seconds / 3600.0));
            st.put("checksum", &sum.checksum);
        }
        Command::PretrainEncoders { random_encoders } => {
            let mut extra = Vec::new();
            if *random_encoders {
                extra.push(("encoder_steps", "0".to_string()));
            }
            let mut cfg = resolve_config(&cli.global, &extra)?;
            let corpus = pipeline::load_corpus(&cfg.corpus_dir)?;
            adopt_corpus_shape(&mut cfg, &corpus.config);
            let t = Instant::now();
            let (frozen, rep) = pipeline::pretrain_frozen(&cfg, &corpus.corpus, &corpus.vocab)?;
            create_dir(&cfg.output_dir)?;
            pipeline::encoders_checkpoint(&cfg, &frozen.encoders).save(&cfg.output_dir.join(pipeline::ENCODERS))?;
            pipeline::decoder_checkpoint(&cfg, &corpus.vocab, &frozen.decoder).save(&cfg.output_dir.join(pipeline::DECODER))?;
            st.put("encoders", cfg.output_dir.join(pipeline::ENCODERS).display());
            st.put("pretrained", frozen.encoders.pretrained);
            if let Some(e) = &rep.encoders {
                st.put("frame_acc", format!("{:.4}", e.frame_accuracy));
            }
            let tail = rep.decoder.losses.iter().rev().take(50).sum::<f64>() / rep.decoder.losses.len().clamp(1, 50) as f64;
            st.put("lm_loss", format!("{tail:.4}"));
            st.put("seconds", format!("{:.1}", t.elapsed().as_secs_f64()));
        }
        Command::Train(a) => {
            let mut extra = Vec::new();
            if let Some(t) = &a.task {
                extra.push(("task", t.clone()));
            }
            if let Some(x) = a.alpha {
                extra.push(("alpha", format!("{x:?}")));
            }
            if let Some(x) = a.beta {
                extra.push(("beta", format!("{x:?}")));
            }
            if let Some(v) = &a.variant {
                extra.push(("variant", v.clone()));
            }
            if let Some(s) = a.steps {
                extra.push(("total_steps", s.to_string()));
            }
            let mut cfg = resolve_config(&cli.global, &extra)?;
            let corpus = pipeline::load_corpus(&cfg.corpus_dir)?;
            adopt_corpus_shape(&mut cfg, &corpus.config);
            check_corpus_matches(&cfg, &corpus)?;
            if cli.global.dump_config {
                say(out, &cfg.to_text());
            }
            let frozen = frozen_dir(&cfg, &a.frozen);
            let decoder = pipeline::load_decoder(&frozen.join(pipeline::DECODER), &corpus.vocab)?;
            let mut model = pipeline::build_model(&cfg, &corpus.vocab, &decoder)?;
            let mut parent = None;
            if let Some(p) = &a.init_from {
                let (init, _, ck) = pipeline::load_model(p)?;
                if !init.store.same_layout(&model.store) {
                    return Err(FormatError::Core(dualfuse_core::Error::IncompatibleCheckpoint(format!(
                        "{}: parameter layout differs from the configured model",
                        p.display()
                    ))));
                }
                let trainable: Vec<bool> = model.store.iter().map(|(_, p)| p.trainable).collect();
                model.store = init.store;
                for (p, t) in model.store.iter_mut().zip(trainable) {
                    p.trainable = t;
                }
                parent = Some(ck.id());
            }
            let cache = features(&corpus, &frozen, &cfg, &[Split::Train, Split::Dev])?;
            let data = TaskData::prepare(&corpus.corpus, &corpus.vocab, cfg.task)?;
            let files = RunFiles { dir: Some(cfg.output_dir.clone()), resume: a.resume, stop_after: a.stop_after, parent };
            let t = Instant::now();
            let progress = a.progress;
            let outcome = pipeline::run_training(&cfg, model, &data, &cache, &files, |r| {
                if let LogRecord::Step { step, l_all, lid_acc, .. } = r {
                    if progress > 0 && step % progress == 0 {
                        let lid = lid_acc.map_or("-".to_string(), |x| format!("{x:.3}"));
                        say(out, &format!("step {step} loss {l_all:.4} lid {lid} elapsed {:.0}s\n", t.elapsed().as_secs_f64()));
                    }
                }
                if let LogRecord::Dev { step, l_all, kept, .. } = r {
                    say(out, &format!("dev step {step} loss {l_all:.4}{}\n", if *kept { " kept" } else { "" }));
                }
            })?;
            st.put("task", cfg.task.as_str());
            st.put("variant", cfg.variant.as_str());
            st.put("finished", outcome.finished);
            if let Some(s) = outcome.resumed_from {
                st.put("resumed_from", s);
            }
            st.put("step", outcome.log.iter().map(LogRecord::step).max().unwrap_or(0));
            if let Some(d) = &outcome.final_dev {
                st.put("dev_loss", format!("{:.6}", d.losses.l_all));
                if let Some(x) = d.lid_accuracy {
                    st.put("lid_acc", format!("{x:.4}"));
                }
                st.put("checkpoint", cfg.output_dir.join(pipeline::FINAL).display());
            } else {
                st.put("checkpoint", cfg.output_dir.join(pipeline::LAST).display());
            }
        }
        Command::Eval { checkpoint, split, task, hypotheses, frozen } => {
            let cfg0 = resolve_config(&cli.global, &[])?;
            let path = checkpoint.clone().unwrap_or_else(|| cfg0.output_dir.join(pipeline::FINAL));
            let (model, ck_cfg, _) = pipeline::load_model(&path)?;
            if let Some(t) = task {
                let t = Task::parse(t)?;
                if t != ck_cfg.task {
                    return Err(FormatError::Core(dualfuse_core::Error::IncompatibleCheckpoint(format!(
                        "{} was trained for {}, not {}",
                        path.display(),
                        ck_cfg.task.as_str(),
                        t.as_str()
                    ))));
                }
            }
            let split = parse_split(split)?;
            let corpus = pipeline::load_corpus(&cfg0.corpus_dir)?;
            if corpus.vocab != model.vocab {
                return Err(FormatError::Core(dualfuse_core::Error::IncompatibleCheckpoint(
                    "checkpoint vocabulary differs from the corpus".into(),
                )));
            }
            let data = TaskData::prepare(&corpus.corpus, &corpus.vocab, ck_cfg.task)?;
            let rep = match hypotheses {
                Some(h) => score_hypotheses(&data, &corpus, split, h, &model)?,
                None => {
                    let cache = features(&corpus, &frozen_dir(&cfg0, frozen), &ck_cfg, &[split])?;
                    evaluate(&model, &data, &cache, split, cfg0.eval_limit, cfg0.max_new_tokens)?
                }
            };
            let table = report::eval_table(&rep);
            say(out, &table);
            create_dir(&cfg0.output_dir)?;
            let stem = format!("eval-{}-{}", ck_cfg.task.as_str(), split.as_str());
            let ids = |i: usize| corpus.corpus.records[i].id.clone();
            write_atomic(&cfg0.output_dir.join(format!("{stem}.txt")), table.as_bytes())?;
            write_atomic(&cfg0.output_dir.join(format!("{stem}.jsonl")), report::eval_jsonl(&rep, &ids).as_bytes())?;
            st.put("task", rep.task.as_str());
            st.put("split", split.as_str());
            st.put("utterances", rep.utterances);
            st.put("wer", format!("{:.4}", rep.wer));
            st.put("bleu", format!("{:.2}", rep.bleu));
            if let Some(x) = rep.lid_accuracy {
                st.put("lid_acc", format!("{x:.4}"));
            }
            if let Some(x) = rep.cot_well_formed {
                st.put("cot_well_formed", format!("{x:.4}"));
            }
            st.put("report", cfg0.output_dir.join(format!("{stem}.jsonl")).display());
        }
        Command::Analyze { checkpoints, split, frozen } => {
            let cfg0 = resolve_config(&cli.global, &[])?;
            let split = parse_split(split)?;
            let corpus = pipeline::load_corpus(&cfg0.corpus_dir)?;
            let mut gates = Vec::new();
            let mut seps = Vec::new();
            let mut cache: Option<FeatureCache> = None;
            for p in checkpoints {
                let (model, ck_cfg, _) = pipeline::load_model(p)?;
                if cache.is_none() {
                    cache = Some(features(&corpus, &frozen_dir(&cfg0, frozen), &ck_cfg, &[split])?);
                }
                let data = TaskData::prepare(&corpus.corpus, &corpus.vocab, ck_cfg.task)?;
                gates.push(gate_report(&model));
                seps.push(language_separation(&model, &data, cache.as_ref().unwrap(), split, cfg0.eval_limit)?);
            }
            let names = corpus.vocab.language_names().to_vec();
            let gt = report::gate_table(&gates[0], gates.get(1).map(Vec::as_slice));
            let mut text = gt.clone();
            for (i, s) in seps.iter().enumerate() {
                let _ = writeln!(text, "\nseparation ({})", checkpoints[i].display());
                text.push_str(&report::separation_table(s, &names));
            }
            say(out, &text);
            create_dir(&cfg0.output_dir)?;
            write_atomic(&cfg0.output_dir.join("analysis.txt"), text.as_bytes())?;
            write_atomic(
                &cfg0.output_dir.join("gates.jsonl"),
                report::gate_jsonl(&gates[0], gates.get(1).map(Vec::as_slice)).as_bytes(),
            )?;
            for (i, s) in seps.iter().enumerate() {
                write_atomic(&cfg0.output_dir.join(format!("pca-{}.tsv", i + 1)), report::pca_tsv(s, &names).as_bytes())?;
            }
            for (i, s) in seps.iter().enumerate() {
                st.put(&format!("silhouette_{}", i + 1), format!("{:.4}", s.silhouette));
            }
            st.put("report", cfg0.output_dir.join("analysis.txt").display());
        }
        Command::AvgCkpt { output, inputs } => {
            let cks: Vec<Checkpoint> = inputs.iter().map(|p| Checkpoint::load(p)).collect::<Result<_>>()?;
            for (c, p) in cks.iter().zip(inputs).skip(1) {
                if c.kind != cks[0].kind || c.vocab != cks[0].vocab {
                    return Err(FormatError::Core(dualfuse_core::Error::IncompatibleCheckpoint(format!(
                        "{} differs in kind or vocabulary from {}",
                        p.display(),
                        inputs[0].display()
                    ))));
                }
            }
            let stores: Vec<&ParamStore> = cks.iter().map(|c| &c.params).collect();
            let params = average_stores(&stores)?;
            let first = &cks[0];
            let avg = Checkpoint {
                kind: first.kind,
                pretrained: first.pretrained,
                config: first.config.clone(),
                vocab: first.vocab.clone(),
                params,
                provenance: Provenance {
                    step: cks.iter().map(|c| c.provenance.step).max().unwrap_or(0),
                    dev_loss: None,
                    parent: Some(cks.iter().map(Checkpoint::id).collect::<Vec<_>>().join("+")),
                },
                optimizer: None,
            };
            if let Some(d) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(d)?;
            }
            avg.save(output)?;
            st.put("inputs", cks.len());
            st.put("output", output.display());
            st.put("id", avg.id());
        }
        Command::GradCheck { tol } => {
            let opts = GradCheckOptions { tol: *tol, ..GradCheckOptions::default() };
            let results = run_suite(&opts)?;
            let mut text = format!("{:<16} {:<28} {:>12} {:>6}\n", "family", "shape", "worst rel", "ok");
            let mut failed = 0;
            for r in &results {
                let ok = r.report.passed();
                failed += !ok as usize;
                let _ = writeln!(text, "{:<16} {:<28} {:>12.3e} {:>6}", r.family, r.shape, r.report.worst(), ok);
            }
            say(out, &text);
            st.put("checks", results.len());
            st.put("failed", failed);
            if failed > 0 {
                return Err(FormatError::Config(format!("{failed} gradient checks exceeded tolerance {tol}")));
            }
        }
    }
    Ok(st)
}

/// Corpus-defining keys come from the corpus itself.
fn adopt_corpus_shape(cfg: &mut RunConfig, corpus_cfg: &RunConfig) {
    cfg.languages = corpus_cfg.languages;
    cfg.reordering = corpus_cfg.reordering;
    cfg.train_utterances = corpus_cfg.train_utterances;
    cfg.dev_utterances = corpus_cfg.dev_utterances;
    cfg.test_utterances = corpus_cfg.test_utterances;
}

fn score_hypotheses(
    data: &TaskData,
    corpus: &pipeline::LoadedCorpus,
    split: Split,
    path: &Path,
    model: &dualfuse_core::model::SpeechModel,
) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    let mut hyps = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (id, h) = line.split_once('\t').unwrap_or((line, ""));
        hyps.insert(id.to_string(), h.to_string());
    }
    let mut results = Vec::new();
    for i in data.split(split) {
        let rec = &corpus.corpus.records[i];
        let h = hyps
            .get(&rec.id)
            .ok_or_else(|| FormatError::malformed(path, "hypotheses", format!("no hypothesis for {}", rec.id)))?;
        results.push(UtteranceResult {
            record: i,
            language: rec.language,
            reference: data.reference(i).to_string(),
            hypothesis: h.clone(),
            transcript: None,
            lid: None,
            gate: None,
            well_formed: true,
            truncated: false,
        });
    }
    Ok(EvalReport::from_results(
        data.task,
        split,
        model.connector.cfg.variant.as_str(),
        model.vocab.language_names(),
        gate_report(model),
        results,
    )?)
}
