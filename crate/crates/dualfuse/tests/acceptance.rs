//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Trains every model it needs from scratch at the default configuration,
//! which takes most of an hour on one core.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use dualfuse::checkpoint::{Checkpoint, Provenance};
use dualfuse::config::RunConfig;
use dualfuse::pipeline::{self, RunFiles, RunOutcome};
use dualfuse_core::connector::{Routing, Variant};
use dualfuse_core::corpus::{Corpus, Split};
use dualfuse_core::ctc::{ctc_loss, CtcInstance};
use dualfuse_core::eval::{corpus_bleu, evaluate, gate_report, language_separation, wer, EvalReport};
use dualfuse_core::model::SpeechModel;
use dualfuse_core::nn::gradsuite::run_suite;
use dualfuse_core::nn::{GradBuffer, GradCheckOptions, Graph, ParamStore};
use dualfuse_core::training::{average_stores, combine_losses, FeatureCache, TaskData};
use dualfuse_core::vocab::{Task, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

type Outcome = Result<Verdict, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// --- 1: CTC against enumeration -------------------------------------------

fn enumerate_nll(lp: &[f64], classes: usize, target: &[usize]) -> Option<f64> {
    let frames = lp.len() / classes;
    let blank = classes - 1;
    let mut total = 0.0f64;
    let mut any = false;
    for code in 0..classes.pow(frames as u32) {
        let mut c = code;
        let mut path = Vec::with_capacity(frames);
        for _ in 0..frames {
            path.push(c % classes);
            c /= classes;
        }
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if k != blank && prev != Some(k) {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            any = true;
            total += path.iter().enumerate().map(|(t, &k)| lp[t * classes + k]).sum::<f64>().exp();
        }
    }
    any.then(|| -total.ln())
}

fn ctc_vs_enumeration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut disagreements = 0;
    let mut compared = 0;
    for _ in 0..200 {
        let frames = rng.gen_range(1..=8);
        let vocab = rng.gen_range(1..=3);
        let classes = vocab + 1;
        let len = rng.gen_range(0..=frames.min(4));
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        let logits: Vec<f64> = (0..frames * classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lp: Vec<f64> = logits
            .chunks(classes)
            .flat_map(|r| {
                let z = r.iter().map(|x| x.exp()).sum::<f64>().ln();
                r.iter().map(move |x| x - z).collect::<Vec<_>>()
            })
            .collect();
        let ours = CtcInstance::new(lp.clone(), classes, target.clone()).and_then(|i| ctc_loss(&i)).ok();
        match (ours, enumerate_nll(&lp, classes, &target)) {
            (Some(l), Some(o)) => {
                worst = worst.max((l.nll - o).abs());
                compared += 1;
            }
            (None, None) => {}
            _ => disagreements += 1,
        }
    }
    Ok(verdict(
        worst <= 1e-6 && disagreements == 0,
        format!("200 instances ({compared} feasible), max |diff| {worst:.2e}, feasibility disagreements {disagreements}"),
    ))
}

// --- 2: gradient checks ------------------------------------------------------

fn gradient_checks() -> Outcome {
    let opts = GradCheckOptions { tol: 1e-3, ..GradCheckOptions::default() };
    let results = run_suite(&opts).map_err(err)?;
    let mut notes = Vec::new();
    let mut pass = true;
    for fam in ["dense", "attention_block", "conv", "ctc", "cross_entropy", "gate"] {
        let rs: Vec<_> = results.iter().filter(|r| r.family == fam).collect();
        let ok = rs.len() >= 3 && rs.iter().all(|r| r.report.passed());
        let rel = rs.iter().map(|r| r.report.worst()).fold(0.0f64, f64::max);
        let abs = rs.iter().map(|r| r.report.worst_abs()).fold(0.0f64, f64::max);
        pass &= ok;
        notes.push(format!("{fam} {} shapes rel {rel:.1e} abs {abs:.1e}", rs.len()));
    }
    Ok(verdict(pass, notes.join(", ")))
}

// --- 3: loss combination -------------------------------------------------------

fn f64_grads(m: &SpeechModel, store: &ParamStore<f64>, data: &TaskData, cache: &FeatureCache, rec: usize, a: f64, b: f64) -> Result<Vec<f64>, String> {
    let u = data.input(cache, rec, true).map_err(err)?;
    let mut g = Graph::new(store);
    let l = m.utterance_loss(&mut g, &u, Routing::Language(u.language), a, b).map_err(err)?;
    let mut buf = GradBuffer::for_store(store);
    g.backward(l.all, &mut buf).map_err(err)?;
    Ok(buf.iter().flat_map(|(_, v)| v.to_vec()).collect())
}

fn loss_combination(lab: &Lab) -> Outcome {
    let b = combine_losses(2.0, 5.0, 0.7, 0.1, 0.05).map_err(err)?;
    let value_ok = (b.l_all - 2.335).abs() < 1e-12;
    let m = lab.fresh(Variant::Full)?;
    let store = m.store.cast::<f64>();
    let rec = lab.asr.split(Split::Train)[0];
    let g = |a, b| f64_grads(&m, &store, &lab.asr, &lab.cache, rec, a, b);
    let (g00, g10, g01) = (g(0.0, 0.0)?, g(0.1, 0.0)?, g(0.0, 0.05)?);
    let mut worst = 0.0f64;
    for (a, bb) in [(0.1, 0.05), (0.4, 0.3), (0.7, 1.5)] {
        let got = g(a, bb)?;
        let scale = got.iter().fold(1.0f64, |s, v| s.max(v.abs()));
        for k in 0..got.len() {
            // affine in each weight: g00 + (a/0.1)(g10-g00) + (b/0.05)(g01-g00)
            let pred = g00[k] + a / 0.1 * (g10[k] - g00[k]) + bb / 0.05 * (g01[k] - g00[k]);
            worst = worst.max((got[k] - pred).abs() / scale);
        }
    }
    Ok(verdict(value_ok && worst <= 1e-6, format!("L_all(2, 5, 0.7) = {:.6}, max gradient deviation from linearity {worst:.2e}", b.l_all)))
}

// --- training lab ----------------------------------------------------------------

struct Lab {
    cfg: RunConfig,
    corpus: Corpus,
    vocab: Vocab,
    decoder: ParamStore,
    cache: FeatureCache,
    asr: TaskData,
    setup_seconds: f64,
}

impl Lab {
    fn new() -> Result<Self, String> {
        let t = Instant::now();
        let cfg = RunConfig::default();
        let corpus = pipeline::generate(&cfg).map_err(err)?;
        let vocab = pipeline::vocab_for(&corpus.languages).map_err(err)?;
        let (frozen, _) = pipeline::pretrain_frozen(&cfg, &corpus, &vocab).map_err(err)?;
        let cache = FeatureCache::build(&corpus, &frozen.encoders, &[Split::Train, Split::Dev]).map_err(err)?;
        let asr = TaskData::prepare(&corpus, &vocab, Task::Asr).map_err(err)?;
        let setup_seconds = t.elapsed().as_secs_f64();
        eprintln!("setup {setup_seconds:.0}s");
        Ok(Self { cfg, corpus, vocab, decoder: frozen.decoder, cache, asr, setup_seconds })
    }

    fn config(&self, variant: Variant, task: Task) -> RunConfig {
        let mut c = self.cfg.clone();
        c.variant = variant;
        c.task = task;
        c
    }

    fn fresh(&self, variant: Variant) -> Result<SpeechModel, String> {
        pipeline::build_model(&self.config(variant, Task::Asr), &self.vocab, &self.decoder).map_err(err)
    }

    fn train(&self, cfg: &RunConfig, model: SpeechModel, data: &TaskData, cache: &FeatureCache) -> Result<RunOutcome, String> {
        let t = Instant::now();
        let out = pipeline::run_training(cfg, model, data, cache, &RunFiles::default(), |_| {}).map_err(err)?;
        eprintln!("trained {} {} in {:.0}s", cfg.variant.as_str(), cfg.task.as_str(), t.elapsed().as_secs_f64());
        Ok(out)
    }

    fn eval(&self, model: &SpeechModel, data: &TaskData) -> Result<EvalReport, String> {
        evaluate(model, data, &self.cache, Split::Dev, 0, self.cfg.max_new_tokens).map_err(err)
    }
}

struct Ablation {
    models: Vec<(Variant, SpeechModel, EvalReport)>,
    seconds: f64,
}

impl Ablation {
    fn get(&self, v: Variant) -> &(Variant, SpeechModel, EvalReport) {
        self.models.iter().find(|m| m.0 == v).unwrap()
    }
}

fn run_ablation(lab: &Lab) -> Result<Ablation, String> {
    let t = Instant::now();
    let mut models = Vec::new();
    for v in Variant::ALL {
        let cfg = lab.config(v, Task::Asr);
        let out = lab.train(&cfg, lab.fresh(v)?, &lab.asr, &lab.cache)?;
        let rep = lab.eval(&out.model, &lab.asr)?;
        eprintln!("{} dev WER {:.4}", v.as_str(), rep.wer);
        models.push((v, out.model, rep));
    }
    Ok(Ablation { models, seconds: lab.setup_seconds + t.elapsed().as_secs_f64() })
}

// --- 4, 5, 7: ablation, LID, separation ------------------------------------------

fn ablation_order(ab: &Ablation) -> Outcome {
    let w = |v| ab.get(v).2.wer;
    let (full, nows, single, noctc) =
        (w(Variant::Full), w(Variant::NoWeightSelector), w(Variant::SingleEncoder), w(Variant::SingleEncoderNoCtc));
    let ordered = full <= nows && nows <= single && single <= noctc;
    let gain = if noctc > 0.0 { (noctc - full) / noctc } else { 0.0 };
    let fast = ab.seconds < 7200.0;
    Ok(verdict(
        ordered && gain >= 0.10 && fast,
        format!(
            "dev WER full {full:.4} <= no-ws {nows:.4} <= single {single:.4} <= single-no-ctc {noctc:.4}: {ordered}; \
             relative gain {:.1}%; {:.0}s total",
            100.0 * gain,
            ab.seconds
        ),
    ))
}

fn lid_accuracy(ab: &Ablation) -> Outcome {
    let acc = ab.get(Variant::Full).2.lid_accuracy.ok_or("full model reports no LID")?;
    Ok(verdict(acc >= 0.95, format!("dev LID accuracy {:.4}", acc)))
}

fn separation(lab: &Lab, ab: &Ablation) -> Outcome {
    let s = |v| language_separation(&ab.get(v).1, &lab.asr, &lab.cache, Split::Dev, 0).map_err(err);
    let (full, single) = (s(Variant::Full)?, s(Variant::SingleEncoder)?);
    let d = full.silhouette - single.silhouette;
    Ok(verdict(d >= 0.05, format!("silhouette full {:.4} single {:.4} difference {d:.4}", full.silhouette, single.silhouette)))
}

// --- 6: gate divergence --------------------------------------------------------

fn gate_divergence(lab: &Lab) -> Outcome {
    let target = 0;
    let mut cache = lab.cache.clone();
    // strong: three times the RMS of the clean waveform features
    let (mut sq, mut n) = (0.0f64, 0usize);
    for i in 0..lab.corpus.records.len() {
        if let Ok((_, m)) = lab.cache.get(i) {
            sq += m.frames.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            n += m.frames.data().len();
        }
    }
    let std = 3.0 * (sq / n.max(1) as f64).sqrt();
    cache.corrupt_waveform(&lab.corpus, target, std, 99);
    let cfg = lab.config(Variant::Full, Task::Asr);
    let out = lab.train(&cfg, lab.fresh(Variant::Full)?, &lab.asr, &cache)?;
    let rows = gate_report(&out.model);
    let w: Vec<String> = rows.iter().map(|r| format!("{}={:.3}", r.language, r.weight)).collect();
    let delta = rows[target].delta;
    Ok(verdict(
        delta <= -0.1,
        format!("noise std {std:.2} on the waveform features of {}; w' {}; gap to the others {delta:.3}", rows[target].language, w.join(" ")),
    ))
}

// --- 8: speech translation --------------------------------------------------------

fn translation(lab: &Lab, ab: &Ablation) -> Outcome {
    let init = &ab.get(Variant::Full).1;
    let ast = TaskData::prepare(&lab.corpus, &lab.vocab, Task::Ast).map_err(err)?;
    let cfg = lab.config(Variant::Full, Task::Ast);
    let out = lab.train(&cfg, init.clone(), &ast, &lab.cache)?;
    let rep = lab.eval(&out.model, &ast)?;
    let cot = TaskData::prepare(&lab.corpus, &lab.vocab, Task::AstCot).map_err(err)?;
    let cfg = lab.config(Variant::Full, Task::AstCot);
    let out = lab.train(&cfg, init.clone(), &cot, &lab.cache)?;
    let crep = lab.eval(&out.model, &cot)?;
    let wf = crep.cot_well_formed.unwrap_or(0.0);
    Ok(verdict(
        rep.bleu >= 90.0 && wf >= 0.95,
        format!("AST dev BLEU {:.2}; COT BLEU {:.2}, transcript-then-translation {:.1}%", rep.bleu, crep.bleu, 100.0 * wf),
    ))
}

// --- 9: determinism ----------------------------------------------------------------

fn determinism(lab: &Lab) -> Outcome {
    let mut cfg = lab.config(Variant::Full, Task::Asr);
    cfg.total_steps = 40;
    cfg.warmup_steps = 5;
    cfg.dev_every = 10;
    cfg.dev_subset = 20;
    let a = lab.train(&cfg, lab.fresh(Variant::Full)?, &lab.asr, &lab.cache)?;
    let b = lab.train(&cfg, lab.fresh(Variant::Full)?, &lab.asr, &lab.cache)?;
    let same_run = a.log == b.log && a.model.store == b.model.store;

    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("m.ckpt");
    let prov = Provenance { step: 40, dev_loss: a.final_dev.as_ref().map(|d| d.losses.l_all), parent: None };
    let ck = pipeline::model_checkpoint(&cfg, &a.model, prov, None);
    ck.save(&path).map_err(err)?;
    let bytes = std::fs::read(&path).map_err(err)?;
    let back = Checkpoint::load(Path::new(&path)).map_err(err)?;
    let round_trip = back.to_bytes() == bytes && back.params == a.model.store;

    let copies: Vec<&ParamStore> = (0..5).map(|_| &a.model.store).collect();
    let avg = average_stores(&copies).map_err(err)?;
    let identity = avg == a.model.store;
    Ok(verdict(
        same_run && round_trip && identity,
        format!("repeat run identical {same_run}, checkpoint round trip identical {round_trip}, 5-copy average identical {identity}"),
    ))
}

// --- 10: metrics ------------------------------------------------------------------

const RECORDED_SACREBLEU: f64 = 40.93653765389909;

fn sacrebleu_reference() -> Option<f64> {
    let out = std::process::Command::new("python3")
        .args([
            "-c",
            "import sacrebleu; print(repr(sacrebleu.corpus_bleu(['the cat on the mat'], [['the cat sat on the mat']]).score))",
        ])
        .output()
        .ok()?;
    if !out.status.success() {
        return None;
    }
    String::from_utf8(out.stdout).ok()?.trim().parse().ok()
}

fn metrics() -> Outcome {
    let w0 = wer("a b c", "a b c").map_err(err)?;
    let w1 = wer("a b c", "a x c").map_err(err)?;
    let w2 = wer("a b c", "").map_err(err)?;
    let wer_ok = w0 == 0.0 && (w1 - 1.0 / 3.0).abs() < 1e-12 && w2 == 1.0;
    let ours = corpus_bleu(&[("the cat sat on the mat", "the cat on the mat")]);
    let (reference, source) = match sacrebleu_reference() {
        Some(v) => (v, "sacrebleu"),
        None => (RECORDED_SACREBLEU, "recorded sacrebleu value, python sacrebleu unavailable"),
    };
    let bleu_ok = (ours - reference).abs() <= 0.01;
    Ok(verdict(
        wer_ok && bleu_ok,
        format!("WER {w0} / {w1:.4} / {w2}; BLEU {ours:.4} vs {reference:.4} ({source})"),
    ))
}

fn main() -> ExitCode {
    // libtest arguments such as --nocapture are accepted and ignored
    let mut lines = Vec::new();
    let mut report = |id: &str, name: &str, o: Outcome| {
        let (tag, detail) = match o {
            Ok(v) => (if v.pass { "PASS" } else { "FAIL" }, v.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        let line = format!("{tag} {id} {name}: {detail}");
        println!("{line}");
        lines.push(tag == "PASS");
    };
    report("1", "ctc-vs-enumeration", ctc_vs_enumeration());
    report("2", "gradient-checks", gradient_checks());
    report("10", "metrics", metrics());
    match Lab::new() {
        Ok(lab) => {
            report("3", "loss-combination", loss_combination(&lab));
            report("9", "determinism", determinism(&lab));
            match run_ablation(&lab) {
                Ok(ab) => {
                    report("4", "ablation", ablation_order(&ab));
                    report("5", "lid-accuracy", lid_accuracy(&ab));
                    report("7", "language-separation", separation(&lab, &ab));
                    report("8", "speech-translation", translation(&lab, &ab));
                }
                Err(e) => {
                    for (id, name) in [("4", "ablation"), ("5", "lid-accuracy"), ("7", "language-separation"), ("8", "speech-translation")] {
                        report(id, name, Err(e.clone()));
                    }
                }
            }
            report("6", "gate-divergence", gate_divergence(&lab));
        }
        Err(e) => {
            for (id, name) in [
                ("3", "loss-combination"),
                ("9", "determinism"),
                ("4", "ablation"),
                ("5", "lid-accuracy"),
                ("7", "language-separation"),
                ("8", "speech-translation"),
                ("6", "gate-divergence"),
            ] {
                report(id, name, Err(e.clone()));
            }
        }
    }
    let passed = lines.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", lines.len());
    if passed == lines.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
