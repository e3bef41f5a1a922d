//! Metrics and analysis: WER, BLEU, LID accuracy, gate divergence,
//! silhouette and a 2-D projection of speech embeddings.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::model::SpeechModel;
use crate::training::{FeatureCache, TaskData};
use crate::vocab::{split_segments, Task, Vocab};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (up + 1).min(row[j] + 1).min(diag + (x != y) as usize);
            diag = up;
        }
    }
    row[b.len()]
}

/// Word errors and reference length for one pair.
pub fn word_errors(reference: &str, hypothesis: &str) -> (usize, usize) {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    (edit_distance(&r, &h), r.len())
}

pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    corpus_wer(&[(reference, hypothesis)])
}

/// Total word errors over total reference words.
pub fn corpus_wer(pairs: &[(&str, &str)]) -> Result<f64> {
    let (mut e, mut n) = (0, 0);
    for (r, h) in pairs {
        let (de, dn) = word_errors(r, h);
        e += de;
        n += dn;
    }
    if n == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(e as f64 / n as f64)
}

fn ngrams<'a>(words: &'a [&'a str], n: usize) -> Vec<&'a [&'a str]> {
    if words.len() < n {
        return Vec::new();
    }
    let mut v: Vec<&[&str]> = words.windows(n).collect();
    v.sort_unstable();
    v
}

/// Clipped n-gram matches between two sorted n-gram lists.
fn clipped_matches(hyp: &[&[&str]], reference: &[&[&str]]) -> usize {
    let (mut i, mut j, mut m) = (0, 0, 0);
    while i < hyp.len() && j < reference.len() {
        match hyp[i].cmp(reference[j]) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                m += 1;
                i += 1;
                j += 1;
            }
        }
    }
    m
}

/// Corpus BLEU-4 on whitespace tokens, 0 to 100, with exponential
/// smoothing of zero n-gram matches.
pub fn corpus_bleu(pairs: &[(&str, &str)]) -> f64 {
    let mut correct = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (r, h) in pairs {
        let rw: Vec<&str> = r.split_whitespace().collect();
        let hw: Vec<&str> = h.split_whitespace().collect();
        hyp_len += hw.len();
        ref_len += rw.len();
        for n in 1..=4 {
            let hg = ngrams(&hw, n);
            correct[n - 1] += clipped_matches(&hg, &ngrams(&rw, n));
            total[n - 1] += hg.len();
        }
    }
    if hyp_len == 0 || correct.iter().all(|&c| c == 0) {
        return 0.0;
    }
    let mut smooth = 1.0;
    let mut log_sum = 0.0;
    for n in 0..4 {
        if total[n] == 0 {
            return 0.0;
        }
        let p = if correct[n] == 0 {
            smooth *= 2.0;
            1.0 / (smooth * total[n] as f64)
        } else {
            correct[n] as f64 / total[n] as f64
        };
        log_sum += libm::log(p);
    }
    let bp = if hyp_len < ref_len { libm::exp(1.0 - ref_len as f64 / hyp_len as f64) } else { 1.0 };
    100.0 * bp * libm::exp(log_sum / 4.0)
}

/// Letters and word boundaries as space-separated tokens: "ab cd"
/// becomes "a b ▁ c d".
pub fn char_tokens(text: &str) -> String {
    let mut out = String::new();
    for w in text.split_whitespace() {
        if !out.is_empty() {
            out.push_str(" \u{2581}");
        }
        for c in w.chars() {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push(c);
        }
    }
    out
}

/// Corpus BLEU-4 over [`char_tokens`]. Synthetic sentences are too short
/// in words to hold 4-grams.
pub fn char_bleu(pairs: &[(&str, &str)]) -> f64 {
    let toks: Vec<(String, String)> = pairs.iter().map(|(r, h)| (char_tokens(r), char_tokens(h))).collect();
    let refs: Vec<(&str, &str)> = toks.iter().map(|(r, h)| (r.as_str(), h.as_str())).collect();
    corpus_bleu(&refs)
}

/// Chain-of-thought output is well formed when it holds exactly one
/// separator with text on both sides.
pub fn cot_well_formed(tokens: &[usize], vocab: &Vocab) -> bool {
    let segs = split_segments(tokens, vocab);
    segs.len() == 2 && segs.iter().all(|s| !s.trim().is_empty())
}

/// Mean silhouette coefficient under Euclidean distance.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let s = silhouette_samples(points, labels)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Silhouette of every point. Points in singleton clusters score 0.
pub fn silhouette_samples(points: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::Precondition("silhouette needs one label per point".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Precondition("silhouette needs at least two clusters".into()));
    }
    let dist = |a: &[f64], b: &[f64]| libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
    let mut out = vec![0.0; points.len()];
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += dist(p, q);
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            out[i] = (b - a) / m;
        }
    }
    Ok(out)
}

/// Projection onto the two leading principal components. Each axis is
/// signed so its largest-magnitude loading is positive.
pub fn pca2(points: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let n = points.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Precondition("pca points differ in dimension".into()));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for p in points {
        for i in 0..d {
            let xi = p[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += xi * (p[j] - mean[j]) / n as f64;
            }
        }
    }
    let mut axes: Vec<Vec<f64>> = Vec::new();
    let scale: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let orthogonalize = |w: &mut [f64], axes: &[Vec<f64>]| {
        for u in axes {
            let dot: f64 = w.iter().zip(u).map(|(x, y)| x * y).sum();
            for (x, y) in w.iter_mut().zip(u) {
                *x -= dot * y;
            }
        }
    };
    for a in 0..2.min(d) {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64 + a as f64) * 1e-3 + if i == a { 1.0 } else { 0.0 }).collect();
        orthogonalize(&mut v, &axes);
        let n0 = libm::sqrt(v.iter().map(|x| x * x).sum());
        v.iter_mut().for_each(|x| *x /= n0);
        for _ in 0..500 {
            let mut w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i * d + j] * v[j]).sum()).collect();
            orthogonalize(&mut w, &axes);
            let norm = libm::sqrt(w.iter().map(|x| x * x).sum());
            // no variance left off the earlier axes
            if norm <= 1e-12 * scale || norm < 1e-300 {
                break;
            }
            v = w.into_iter().map(|x| x / norm).collect();
        }
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; d]);
    }
    let proj = |p: &[f64], u: &[f64]| p.iter().zip(&mean).zip(u).map(|((x, m), w)| (x - m) * w).sum::<f64>();
    Ok(points.iter().map(|p| (proj(p, &axes[0]), proj(p, &axes[1]))).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateRow {
    pub language: String,
    pub raw: f64,
    pub weight: f64,
    /// `weight` minus the mean weight of the other languages.
    pub delta: f64,
}

pub fn gate_report(model: &SpeechModel) -> Vec<GateRow> {
    let table = model.connector.gate_table(&model.store);
    let names = model.vocab.language_names();
    let n = table.len();
    table
        .iter()
        .enumerate()
        .map(|(l, &(raw, weight))| {
            let others = if n > 1 {
                table.iter().enumerate().filter(|(k, _)| *k != l).map(|(_, g)| g.1).sum::<f64>() / (n - 1) as f64
            } else {
                weight
            };
            GateRow { language: names[l].clone(), raw, weight, delta: weight - others }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceResult {
    pub record: usize,
    pub language: usize,
    pub reference: String,
    pub hypothesis: String,
    /// Transcript segment of a chain-of-thought output.
    pub transcript: Option<String>,
    pub lid: Option<usize>,
    pub gate: Option<f64>,
    pub well_formed: bool,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageScore {
    pub language: String,
    pub utterances: usize,
    pub wer: f64,
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub split: Split,
    pub variant: String,
    pub utterances: usize,
    pub wer: f64,
    pub bleu: f64,
    pub lid_accuracy: Option<f64>,
    /// Share of chain-of-thought outputs that are well formed.
    pub cot_well_formed: Option<f64>,
    pub per_language: Vec<LanguageScore>,
    pub gates: Vec<GateRow>,
    pub results: Vec<UtteranceResult>,
}

/// Greedy-decode up to `limit` utterances of a split (0 means all) and
/// score them.
pub fn evaluate(
    model: &SpeechModel,
    data: &TaskData,
    cache: &FeatureCache,
    split: Split,
    limit: usize,
    max_new: usize,
) -> Result<EvalReport> {
    let items = crate::training::trainer::spread(&data.split(split), limit);
    if items.is_empty() {
        return Err(Error::Precondition(alloc::format!("no {} utterances", split.as_str())));
    }
    let dual = model.connector.cfg.variant.dual();
    let vocab = &model.vocab;
    let mut results = Vec::with_capacity(items.len());
    for &i in &items {
        let u = data.input(cache, i, dual)?;
        let (gen, dec) = model.generate(&u, max_new)?;
        let (hypothesis, transcript, well_formed) = if data.task == Task::AstCot {
            let segs = split_segments(&gen.tokens, vocab);
            let ok = cot_well_formed(&gen.tokens, vocab);
            (segs.last().cloned().unwrap_or_default(), segs.first().cloned(), ok)
        } else {
            (vocab.decode_text(&gen.tokens), None, !gen.truncated)
        };
        results.push(UtteranceResult {
            record: i,
            language: u.language,
            reference: String::from(data.reference(i)),
            hypothesis,
            transcript,
            lid: dec.lid,
            gate: dec.gate,
            well_formed,
            truncated: gen.truncated,
        });
    }
    EvalReport::from_results(
        data.task,
        split,
        model.connector.cfg.variant.as_str(),
        vocab.language_names(),
        gate_report(model),
        results,
    )
}

impl EvalReport {
    /// Aggregate scored utterances into a report.
    pub fn from_results(
        task: Task,
        split: Split,
        variant: &str,
        language_names: &[String],
        gates: Vec<GateRow>,
        results: Vec<UtteranceResult>,
    ) -> Result<Self> {
        let pairs = |f: &dyn Fn(&UtteranceResult) -> bool| -> Vec<(&str, &str)> {
            results.iter().filter(|r| f(r)).map(|r| (r.reference.as_str(), r.hypothesis.as_str())).collect()
        };
        let all = pairs(&|_| true);
        let wer = corpus_wer(&all)?;
        let bleu = char_bleu(&all);
        let lid: Vec<bool> = results.iter().filter_map(|r| r.lid.map(|p| p == r.language)).collect();
        let lid_accuracy = (!lid.is_empty()).then(|| lid.iter().filter(|&&c| c).count() as f64 / lid.len() as f64);
        let cot = (task == Task::AstCot)
            .then(|| results.iter().filter(|r| r.well_formed).count() as f64 / results.len() as f64);
        let mut per_language = Vec::new();
        for (l, name) in language_names.iter().enumerate() {
            let p = pairs(&|r| r.language == l);
            if p.is_empty() {
                continue;
            }
            per_language.push(LanguageScore {
                language: name.clone(),
                utterances: p.len(),
                wer: corpus_wer(&p)?,
                bleu: char_bleu(&p),
            });
        }
        Ok(EvalReport {
            task,
            split,
            variant: String::from(variant),
            utterances: results.len(),
            wer,
            bleu,
            lid_accuracy,
            cot_well_formed: cot,
            per_language,
            gates,
            results,
        })
    }
}

/// Embedding geometry of a split: silhouette by language and a 2-D
/// projection as (x, y, language) triples.
#[derive(Clone, Debug, PartialEq)]
pub struct Separation {
    pub silhouette: f64,
    /// Mean silhouette of each language's points.
    pub per_language: Vec<f64>,
    pub points: Vec<(f64, f64, usize)>,
}

pub fn language_separation(
    model: &SpeechModel,
    data: &TaskData,
    cache: &FeatureCache,
    split: Split,
    limit: usize,
) -> Result<Separation> {
    let items = crate::training::trainer::spread(&data.split(split), limit);
    let dual = model.connector.cfg.variant.dual();
    let mut pts = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for &i in &items {
        let u = data.input(cache, i, dual)?;
        pts.push(model.pooled_speech(&u)?.into_iter().map(|x| x as f64).collect::<Vec<f64>>());
        labels.push(u.language);
    }
    let samples = silhouette_samples(&pts, &labels)?;
    let silhouette = samples.iter().sum::<f64>() / samples.len() as f64;
    let mut per_language = Vec::with_capacity(data.languages);
    for l in 0..data.languages {
        let v: Vec<f64> = samples.iter().zip(&labels).filter(|(_, &k)| k == l).map(|(s, _)| *s).collect();
        per_language.push(if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 });
    }
    let points = pca2(&pts)?.into_iter().zip(labels).map(|((x, y), l)| (x, y, l)).collect();
    Ok(Separation { silhouette, per_language, points })
}
