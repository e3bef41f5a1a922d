//! Synthetic multilingual corpus: per-language alphabets, bigram text
//! models, tone renderers, bijective translations and monolingual batching.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::audio::{synth_utterance, ToneSpec, Voice, Waveform, TOKEN_SAMPLES};
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};
use crate::training::sampler::LanguageSampler;

/// Shared letter inventory; each language uses a subset.
pub const ALPHABET: [char; 16] = ['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'k', 'l', 'm', 'n', 'o', 'p', 'r'];
pub const LETTERS_PER_LANGUAGE: usize = 10;
/// Rendered word boundary.
pub const WORD_BOUNDARY: char = '▁';

pub const LANGUAGE_NAMES: [&str; 12] = [
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa", "lambda", "mu",
];

/// Relative corpus sizes for the default languages (largest first).
pub const DEFAULT_SIZE_RATIOS: [f64; 4] = [10.0, 4.0, 2.0, 1.0];
/// Number of phase-coded token pairs per language; only a phase-aware
/// encoder separates the two tokens of a pair.
pub const PHASE_TWINS: [usize; 8] = [1, 3, 2, 3, 1, 2, 3, 2];

const MIN_WORD: usize = 2;
const MAX_WORD: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BigramTable {
    /// letters followed by the word boundary
    states: Vec<char>,
    /// row-normalized transition probabilities `states x states`
    probs: Vec<Vec<f64>>,
}

impl BigramTable {
    pub fn states(&self) -> &[char] {
        &self.states
    }

    pub fn prob(&self, from: char, to: char) -> f64 {
        let (Some(i), Some(j)) = (self.index(from), self.index(to)) else { return 0.0 };
        self.probs[i][j]
    }

    pub fn row(&self, from: char) -> Option<&[f64]> {
        self.index(from).map(|i| self.probs[i].as_slice())
    }

    fn index(&self, c: char) -> Option<usize> {
        self.states.iter().position(|&s| s == c)
    }

    /// Mean row-wise total-variation distance over the union of states;
    /// a row missing from one table counts as maximally different.
    pub fn tv_distance(&self, other: &BigramTable) -> f64 {
        let mut union: Vec<char> = self.states.clone();
        for &c in &other.states {
            if !union.contains(&c) {
                union.push(c);
            }
        }
        let mut total = 0.0;
        for &r in &union {
            let d = match (self.index(r), other.index(r)) {
                (Some(_), Some(_)) => 0.5 * union.iter().map(|&c| (self.prob(r, c) - other.prob(r, c)).abs()).sum::<f64>(),
                _ => 1.0,
            };
            total += d;
        }
        total / union.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageSpec {
    pub id: usize,
    pub name: String,
    pub letters: Vec<char>,
    pub bigram: BigramTable,
    pub voice: Voice,
    pub hours_scale: f64,
    /// Letter pairs rendered with identical magnitude spectra.
    pub twins: Vec<(char, char)>,
}

impl LanguageSpec {
    /// Sample a transcript of 2-3 words, each 2-4 letters, from the bigram
    /// model. No letter repeats immediately.
    pub fn sample_transcript(&self, rng: &mut impl Rng) -> String {
        let words = rng.gen_range(2..=3);
        let mut out = String::new();
        for w in 0..words {
            if w > 0 {
                out.push(' ');
            }
            let mut prev = WORD_BOUNDARY;
            let mut len = 0;
            loop {
                let row = self.bigram.row(prev).expect("state present");
                let mut weights: Vec<f64> = row.to_vec();
                let b = weights.len() - 1;
                if len < MIN_WORD {
                    weights[b] = 0.0;
                }
                if len >= MAX_WORD {
                    break;
                }
                let z: f64 = weights.iter().sum();
                if z <= 0.0 {
                    break;
                }
                let mut u = rng.gen::<f64>() * z;
                let mut pick = b;
                for (i, &wt) in weights.iter().enumerate() {
                    if u < wt {
                        pick = i;
                        break;
                    }
                    u -= wt;
                }
                if pick == b {
                    break;
                }
                let c = self.bigram.states[pick];
                out.push(c);
                prev = c;
                len += 1;
            }
        }
        out
    }
}

/// Map a transcript to the renderer's token sequence.
pub fn acoustic_tokens(text: &str) -> Vec<char> {
    text.chars().map(|c| if c == ' ' { WORD_BOUNDARY } else { c }).collect()
}

fn build_bigram(letters: &[char], rng: &mut impl Rng) -> BigramTable {
    let mut states = letters.to_vec();
    states.push(WORD_BOUNDARY);
    let n = states.len();
    let b = n - 1;
    let mut probs = vec![vec![0.0; n]; n];
    for (i, row) in probs.iter_mut().enumerate() {
        let mut cands: Vec<usize> = (0..letters.len()).filter(|&j| j != i).collect();
        cands.shuffle(rng);
        let k = if i == b { 5 } else { 3 };
        for &j in cands.iter().take(k) {
            row[j] = 0.2 + rng.gen::<f64>();
        }
        if i != b {
            row[b] = 0.3 + 0.5 * rng.gen::<f64>();
        }
    }
    // every letter must be reachable from some state
    for j in 0..letters.len() {
        if probs.iter().all(|row| row[j] == 0.0) {
            let mut from: Vec<usize> = (0..n).filter(|&i| i != j).collect();
            from.shuffle(rng);
            probs[from[0]][j] = 0.2 + rng.gen::<f64>();
        }
    }
    for row in probs.iter_mut() {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    BigramTable { states, probs }
}

fn build_voice(letters: &[char], twins: usize, rng: &mut impl Rng) -> (Voice, Vec<(char, char)>) {
    // fundamental grid 400..2000 Hz: partials stay >= 10 FFT bins apart so
    // window leakage does not reveal phase in the magnitude spectrum
    let mut grid: Vec<f64> = (0..27).map(|i| 400.0 + 60.0 * i as f64).collect();
    grid.shuffle(rng);
    let mut order: Vec<char> = letters.to_vec();
    order.shuffle(rng);
    let twin_pairs: Vec<(char, char)> = (0..twins.min(order.len() / 2)).map(|i| (order[2 * i], order[2 * i + 1])).collect();
    let mut tones = BTreeMap::new();
    let mut slot = 0;
    let tone = |rng: &mut dyn rand::RngCore, f0: f64, flip: bool| {
        let a1 = 0.28 + 0.04 * rng.gen::<f64>();
        let a2 = 0.22 + 0.04 * rng.gen::<f64>();
        let a3 = 0.12 + 0.04 * rng.gen::<f64>();
        let ph2 = if flip { core::f64::consts::PI } else { 0.0 };
        ToneSpec { partials: [(f0, a1, 0.0), (2.0 * f0, a2, ph2), (3.0 * f0, a3, 0.0)] }
    };
    for &(a, b) in &twin_pairs {
        let f0 = grid[slot];
        slot += 1;
        let base = tone(rng, f0, false);
        let mut flipped = base.clone();
        flipped.partials[1].2 = core::f64::consts::PI;
        tones.insert(a, base);
        tones.insert(b, flipped);
    }
    for &c in order.iter().skip(2 * twin_pairs.len()) {
        let f0 = grid[slot];
        slot += 1;
        tones.insert(c, tone(rng, f0, false));
    }
    let f0 = grid[slot];
    tones.insert(WORD_BOUNDARY, tone(rng, f0, false));
    (Voice { tones, noise_std: 0.02 }, twin_pairs)
}

/// Deterministic language inventory for `n` languages.
pub fn language_specs(n: usize, seed: u64) -> Result<Vec<LanguageSpec>> {
    if n < 2 || n > LANGUAGE_NAMES.len() {
        return Err(Error::Config(format!("languages must be in 2..={}, got {n}", LANGUAGE_NAMES.len())));
    }
    (0..n)
        .map(|id| {
            let mut r = rng::derive(seed, 1000 + id as u64);
            let mut letters = ALPHABET.to_vec();
            letters.shuffle(&mut r);
            letters.truncate(LETTERS_PER_LANGUAGE);
            letters.sort_unstable();
            let bigram = build_bigram(&letters, &mut r);
            let (voice, twins) = build_voice(&letters, PHASE_TWINS[id % PHASE_TWINS.len()], &mut r);
            let hours_scale = DEFAULT_SIZE_RATIOS.get(id).copied().unwrap_or(1.0);
            Ok(LanguageSpec { id, name: LANGUAGE_NAMES[id].to_string(), letters, bigram, voice, hours_scale, twins })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Target side of an AST pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub language: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub language: usize,
    pub split: Split,
    pub transcript: String,
    pub translation: Option<Translation>,
    pub seed: u64,
    pub duration: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// Order change applied after dictionary mapping. Every rule is an
/// involution, so translating back recovers the source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reordering {
    None,
    /// swap tokens (letters and boundaries) 0<->1, 2<->3, ...
    SwapTokenPairs,
    /// swap words 0<->1, 2<->3, ...
    SwapWordPairs,
}

impl Reordering {
    pub fn as_str(self) -> &'static str {
        match self {
            Reordering::None => "none",
            Reordering::SwapTokenPairs => "swap-token-pairs",
            Reordering::SwapWordPairs => "swap-word-pairs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Reordering::None),
            "swap-token-pairs" => Ok(Reordering::SwapTokenPairs),
            "swap-word-pairs" => Ok(Reordering::SwapWordPairs),
            _ => Err(Error::Config(format!("unknown reordering {s:?}"))),
        }
    }
}

/// Bijective letter dictionary between two languages plus a reordering.
#[derive(Clone, Debug, PartialEq)]
pub struct Translator {
    map: BTreeMap<char, char>,
    reordering: Reordering,
}

impl Translator {
    pub fn new(src: &LanguageSpec, tgt: &LanguageSpec, reordering: Reordering) -> Result<Self> {
        if src.id == tgt.id {
            return Err(Error::Precondition("translation needs distinct languages".into()));
        }
        if src.letters.len() != tgt.letters.len() {
            return Err(Error::Precondition("alphabets must have equal size".into()));
        }
        // one permutation per unordered pair, inverted for the reverse direction
        let (lo, hi) = if src.id < tgt.id { (src, tgt) } else { (tgt, src) };
        let mut r = rng::derive(0x7a11_5e, (lo.id * 64 + hi.id) as u64);
        let mut perm = hi.letters.clone();
        perm.shuffle(&mut r);
        let mut map = BTreeMap::new();
        for (&a, &b) in lo.letters.iter().zip(&perm) {
            if src.id == lo.id {
                map.insert(a, b);
            } else {
                map.insert(b, a);
            }
        }
        Ok(Self { map, reordering })
    }

    pub fn translate(&self, text: &str) -> Result<String> {
        let mut words: Vec<String> = Vec::new();
        for w in text.split(' ') {
            let mut out = String::new();
            for c in w.chars() {
                out.push(*self.map.get(&c).ok_or_else(|| Error::UnknownToken(c.to_string()))?);
            }
            words.push(out);
        }
        match self.reordering {
            Reordering::None => Ok(words.join(" ")),
            Reordering::SwapWordPairs => {
                for pair in words.chunks_mut(2) {
                    if pair.len() == 2 {
                        pair.swap(0, 1);
                    }
                }
                Ok(words.join(" "))
            }
            Reordering::SwapTokenPairs => {
                let mut chars: Vec<char> = words.join(" ").chars().collect();
                for pair in chars.chunks_mut(2) {
                    if pair.len() == 2 {
                        pair.swap(0, 1);
                    }
                }
                Ok(chars.into_iter().collect())
            }
        }
    }
}

pub fn make_translation(transcript: &str, src: &LanguageSpec, tgt: &LanguageSpec, reordering: Reordering) -> Result<String> {
    Translator::new(src, tgt, reordering)?.translate(transcript)
}

/// AST target language for a source language: the first language
/// translates into the second, every other language into the first.
pub fn ast_target(language: usize) -> usize {
    if language == 0 {
        1
    } else {
        0
    }
}

/// Split `total` proportionally to `weights` with largest-remainder rounding.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let z: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / z).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub languages: Vec<LanguageSpec>,
    pub records: Vec<UtteranceRecord>,
    pub reordering: Reordering,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &UtteranceRecord)> {
        self.records.iter().enumerate().filter(move |(_, r)| r.split == split)
    }

    pub fn render(&self, rec: &UtteranceRecord) -> Result<Waveform> {
        let spec = &self.languages[rec.language];
        synth_utterance(&acoustic_tokens(&rec.transcript), &spec.voice, rec.seed)
    }
}

/// Generate the corpus. Training data follows the languages' size ratios;
/// dev and test are balanced across languages.
pub fn generate_corpus(
    languages: Vec<LanguageSpec>,
    sizes: CorpusSizes,
    reordering: Reordering,
    seed: u64,
) -> Result<Corpus> {
    if sizes.train == 0 || sizes.dev == 0 || sizes.test == 0 {
        return Err(Error::Config("every split needs at least one utterance".into()));
    }
    let ratios: Vec<f64> = languages.iter().map(|l| l.hours_scale).collect();
    let even = vec![1.0; languages.len()];
    let plan = [
        (Split::Train, apportion(sizes.train, &ratios)),
        (Split::Dev, apportion(sizes.dev, &even)),
        (Split::Test, apportion(sizes.test, &even)),
    ];
    let translators: Vec<Translator> = languages
        .iter()
        .map(|l| Translator::new(l, &languages[ast_target(l.id)], reordering))
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    for (split, counts) in plan {
        for (lang, &n) in languages.iter().zip(&counts) {
            let mut r = rng::derive(seed, ((split as u64) << 32) | lang.id as u64);
            for k in 0..n {
                let transcript = lang.sample_transcript(&mut r);
                let tgt = ast_target(lang.id);
                let translation = Translation { language: tgt, text: translators[lang.id].translate(&transcript)? };
                let n_tokens = transcript.chars().count();
                records.push(UtteranceRecord {
                    id: format!("{}-{}-{:05}", split.as_str(), lang.name, k),
                    language: lang.id,
                    split,
                    transcript,
                    translation: Some(translation),
                    seed: r.gen(),
                    duration: (n_tokens * TOKEN_SAMPLES) as f64 / crate::audio::SAMPLE_RATE as f64,
                });
            }
        }
    }
    Ok(Corpus { languages, records, reordering })
}

/// A monolingual group of record indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub language: usize,
    pub items: Vec<usize>,
}

/// Endless stream of monolingual batches. The language of each batch is
/// drawn from the rebalanced sampler; within a language, utterances are
/// drawn without replacement and reshuffled when exhausted.
pub struct BatchStream {
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    sampler: LanguageSampler,
    batch_size: usize,
    rng: SeededRng,
}

impl BatchStream {
    pub fn new(items_by_language: Vec<Vec<usize>>, batch_size: usize, gamma: f64, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let present: Vec<usize> = items_by_language.iter().map(|v| v.len()).collect();
        if present.iter().all(|&c| c == 0) {
            return Err(Error::Precondition("manifest is empty".into()));
        }
        let sampler = LanguageSampler::masked(&present, gamma)?;
        let mut rng = rng::rng(seed);
        let mut pools = items_by_language;
        for p in &mut pools {
            p.shuffle(&mut rng);
        }
        let cursors = vec![0; pools.len()];
        Ok(Self { pools, cursors, sampler, batch_size, rng })
    }

    pub fn for_split(corpus: &Corpus, split: Split, batch_size: usize, gamma: f64, seed: u64) -> Result<Self> {
        let mut by_lang = vec![Vec::new(); corpus.languages.len()];
        for (i, r) in corpus.split(split) {
            by_lang[r.language].push(i);
        }
        Self::new(by_lang, batch_size, gamma, seed)
    }

    pub fn sampler(&self) -> &LanguageSampler {
        &self.sampler
    }

    pub fn next_batch(&mut self) -> Batch {
        let language = self.sampler.sample(&mut self.rng);
        let mut items = Vec::with_capacity(self.batch_size);
        let pool_len = self.pools[language].len();
        for _ in 0..self.batch_size.min(pool_len) {
            if self.cursors[language] == pool_len {
                self.pools[language].shuffle(&mut self.rng);
                self.cursors[language] = 0;
            }
            items.push(self.pools[language][self.cursors[language]]);
            self.cursors[language] += 1;
        }
        Batch { language, items }
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(seed: u64) -> Corpus {
        let langs = language_specs(4, seed).unwrap();
        generate_corpus(langs, CorpusSizes { train: 1000, dev: 100, test: 100 }, Reordering::SwapWordPairs, seed).unwrap()
    }

    #[test]
    fn split_counts_are_exact_and_ids_unique() {
        let c = corpus(3);
        assert_eq!(c.split(Split::Train).count(), 1000);
        assert_eq!(c.split(Split::Dev).count(), 100);
        assert_eq!(c.split(Split::Test).count(), 100);
        let mut ids: Vec<&str> = c.records.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 1200);
        let per_lang: Vec<usize> =
            (0..4).map(|l| c.split(Split::Train).filter(|(_, r)| r.language == l).count()).collect();
        assert_eq!(per_lang, vec![588, 235, 118, 59]);
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(corpus(5), corpus(5));
        assert_ne!(corpus(5).records, corpus(6).records);
    }

    #[test]
    fn bigram_rows_normalized_and_languages_distinct() {
        let langs = language_specs(8, 1).unwrap();
        for l in &langs {
            for &s in l.bigram.states() {
                let z: f64 = l.bigram.row(s).unwrap().iter().sum();
                assert!((z - 1.0).abs() < 1e-12);
                assert_eq!(l.bigram.prob(s, s), 0.0);
            }
            for &c in &l.letters {
                assert!(l.bigram.states().iter().any(|&s| l.bigram.prob(s, c) > 0.0), "{c} unreachable");
            }
        }
        for a in &langs {
            for b in &langs {
                if a.id != b.id {
                    assert!(a.bigram.tv_distance(&b.bigram) >= 0.2);
                }
            }
        }
    }

    #[test]
    fn transcripts_obey_word_shape() {
        let langs = language_specs(4, 2).unwrap();
        let mut r = rng::rng(0);
        for l in &langs {
            for _ in 0..200 {
                let t = l.sample_transcript(&mut r);
                let words: Vec<&str> = t.split(' ').collect();
                assert!((2..=3).contains(&words.len()), "{t:?}");
                for w in words {
                    assert!((MIN_WORD..=MAX_WORD).contains(&w.chars().count()), "{t:?}");
                    assert!(w.chars().all(|c| l.letters.contains(&c)));
                }
            }
        }
    }

    #[test]
    fn translation_round_trips() {
        let langs = language_specs(4, 9).unwrap();
        let mut r = rng::rng(1);
        for re in [Reordering::None, Reordering::SwapTokenPairs, Reordering::SwapWordPairs] {
            for src in &langs {
                let tgt = &langs[ast_target(src.id)];
                for _ in 0..50 {
                    let t = src.sample_transcript(&mut r);
                    let fwd = make_translation(&t, src, tgt, re).unwrap();
                    assert_eq!(fwd, make_translation(&t, src, tgt, re).unwrap());
                    assert_eq!(make_translation(&fwd, tgt, src, re).unwrap(), t);
                }
            }
        }
        let (a, b) = (&langs[0], &langs[1]);
        let t: String = a.letters[..5].iter().collect::<String>();
        let t = format!("{} {}", &t[..2], &t[2..]);
        let fwd: Vec<char> = make_translation(&t, a, b, Reordering::SwapTokenPairs).unwrap().chars().collect();
        let plain: Vec<char> = make_translation(&t, a, b, Reordering::None).unwrap().chars().collect();
        assert_eq!(fwd, vec![plain[1], plain[0], plain[3], plain[2], plain[5], plain[4]]);
        assert!(make_translation("zz", &langs[0], &langs[1], Reordering::None).is_err());
        assert!(make_translation("a", &langs[0], &langs[0], Reordering::None).is_err());
    }

    #[test]
    fn batches_are_monolingual_and_without_replacement() {
        let c = corpus(4);
        let mut s = BatchStream::for_split(&c, Split::Train, 8, 0.5, 1).unwrap();
        let mut seen: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); 4];
        let mut drawn = [0usize; 4];
        for _ in 0..7 {
            let b = s.next_batch();
            for &i in &b.items {
                assert_eq!(c.records[i].language, b.language);
                *seen[b.language].entry(i).or_default() += 1;
            }
            drawn[b.language] += b.items.len();
        }
        for l in 0..4 {
            let pool = c.split(Split::Train).filter(|(_, r)| r.language == l).count();
            if drawn[l] <= pool {
                assert!(seen[l].values().all(|&n| n == 1));
            }
        }
    }

    #[test]
    fn render_length_matches_duration() {
        let c = corpus(8);
        let rec = &c.records[0];
        let w = c.render(rec).unwrap();
        assert!((w.duration_secs() - rec.duration).abs() < 1e-9);
    }
}
