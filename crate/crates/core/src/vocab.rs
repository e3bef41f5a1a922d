//! Token inventory shared by the decoder and the CTC head, plus task
//! prompts and label layouts.
//!
//! Layout: `<pad> <eos> <sep>`, one `<lang:NAME>` tag per language, the
//! letter alphabet, the word boundary, then the prompt words.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::corpus::{ALPHABET, WORD_BOUNDARY};
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";

const PROMPT_WORDS: [&str; 13] =
    ["Transcribe", "the", "speech", "to", "text", ".", "Translate", "First", "transcribe", ",", "and", "then", "translate"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    languages: Vec<String>,
}

impl Vocab {
    pub fn build(language_names: &[&str]) -> Result<Self> {
        let mut tokens: Vec<String> = [PAD, EOS, SEP].iter().map(|s| s.to_string()).collect();
        tokens.extend(language_names.iter().map(|n| format!("<lang:{n}>")));
        tokens.extend(ALPHABET.iter().map(|c| c.to_string()));
        tokens.push(WORD_BOUNDARY.to_string());
        tokens.extend(PROMPT_WORDS.iter().map(|s| s.to_string()));
        tokens.extend(language_names.iter().map(|s| s.to_string()));
        Self::from_tokens(tokens)
    }

    /// Rebuild from a serialized token list; index = position.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != PAD || tokens[1] != EOS || tokens[2] != SEP {
            return Err(Error::Config("vocabulary must start with <pad> <eos> <sep>".into()));
        }
        let mut index = BTreeMap::new();
        let mut languages = Vec::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {t:?} at line {}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
            if let Some(name) = t.strip_prefix("<lang:").and_then(|r| r.strip_suffix('>')) {
                languages.push(name.to_string());
            }
        }
        for c in ALPHABET.iter().chain(core::iter::once(&WORD_BOUNDARY)) {
            if !index.contains_key(c.to_string().as_str()) {
                return Err(Error::Config(format!("vocabulary lacks {c:?}")));
            }
        }
        Ok(Self { tokens, index, languages })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn sep(&self) -> usize {
        2
    }

    pub fn language_names(&self) -> &[String] {
        &self.languages
    }

    pub fn lang_tag(&self, language: usize) -> Result<usize> {
        let name = self.languages.get(language).ok_or(Error::Index {
            what: "language",
            index: language,
            size: self.languages.len(),
        })?;
        Ok(self.index[&format!("<lang:{name}>")])
    }

    fn lookup(&self, t: &str) -> Result<usize> {
        self.id(t).ok_or_else(|| Error::UnknownToken(t.to_string()))
    }

    /// Character-level encoding; spaces become the word boundary token.
    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        let mut buf = [0u8; 4];
        text.chars()
            .map(|c| {
                let c = if c == ' ' { WORD_BOUNDARY } else { c };
                self.lookup(c.encode_utf8(&mut buf))
            })
            .collect()
    }

    /// Inverse of [`Vocab::encode_text`]. Non-character tokens are skipped.
    pub fn decode_text(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let Some(t) = self.token(id) else { continue };
            let mut cs = t.chars();
            if let (Some(c), None) = (cs.next(), cs.next()) {
                if c == WORD_BOUNDARY {
                    out.push(' ');
                } else if ALPHABET.contains(&c) {
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn encode_words(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.lookup(w)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Asr,
    Ast,
    AstCot,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Asr, Task::Ast, Task::AstCot];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Asr => "asr",
            Task::Ast => "ast",
            Task::AstCot => "ast-cot",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "asr" => Ok(Task::Asr),
            "ast" => Ok(Task::Ast),
            "ast-cot" => Ok(Task::AstCot),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }

    pub fn needs_translation(self) -> bool {
        self != Task::Asr
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub task: Task,
    pub target_language: Option<usize>,
    pub text: String,
    pub tokens: Vec<usize>,
}

impl PromptTemplate {
    pub fn render(task: Task, target_language: Option<usize>, vocab: &Vocab) -> Result<Self> {
        let name = |l: Option<usize>| -> Result<&str> {
            let l = l.ok_or_else(|| Error::Precondition(format!("{} prompt needs a target language", task.as_str())))?;
            vocab.language_names().get(l).map(String::as_str).ok_or(Error::Index {
                what: "language",
                index: l,
                size: vocab.language_names().len(),
            })
        };
        let text = match task {
            Task::Asr => "Transcribe the speech to text.".to_string(),
            Task::Ast => format!("Translate the speech to {}.", name(target_language)?),
            Task::AstCot => format!(
                "First transcribe the speech to text, and then translate the speech to {}.",
                name(target_language)?
            ),
        };
        let spaced = text.replace('.', " .").replace(',', " ,");
        let tokens = vocab.encode_words(&spaced)?;
        let target_language = if task == Task::Asr { None } else { target_language };
        Ok(Self { task, target_language, text, tokens })
    }
}

/// Label tokens for a task, without the end token. Chain-of-thought labels
/// are the transcript, the separator, then the translation.
pub fn task_labels(task: Task, transcript: &str, translation: Option<&str>, vocab: &Vocab) -> Result<Vec<usize>> {
    let need = || Error::Precondition(format!("{} labels need a translation", task.as_str()));
    match task {
        Task::Asr => vocab.encode_text(transcript),
        Task::Ast => vocab.encode_text(translation.ok_or_else(need)?),
        Task::AstCot => {
            let mut v = vocab.encode_text(transcript)?;
            v.push(vocab.sep());
            v.extend(vocab.encode_text(translation.ok_or_else(need)?)?);
            Ok(v)
        }
    }
}

/// Split a generated chain-of-thought sequence at its separators.
pub fn split_segments(ids: &[usize], vocab: &Vocab) -> Vec<String> {
    ids.split(|&t| t == vocab.sep()).map(|seg| vocab.decode_text(seg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn vocab() -> Vocab {
        Vocab::build(&["alpha", "beta", "gamma", "delta"]).unwrap()
    }

    #[test]
    fn layout_and_round_trip() {
        let v = vocab();
        assert_eq!(v.token(0), Some(PAD));
        assert_eq!(v.token(1), Some(EOS));
        assert_eq!(v.token(2), Some(SEP));
        assert_eq!(v.lang_tag(2).unwrap(), 5);
        assert_eq!(v.len(), 3 + 4 + 16 + 1 + 13 + 4);
        let ids = v.encode_text("abc de").unwrap();
        assert_eq!(ids.len(), 6);
        assert_eq!(v.decode_text(&ids), "abc de");
        assert_eq!(v.encode_text("xyz"), Err(Error::UnknownToken("x".into())));
        assert_eq!(Vocab::from_tokens(v.tokens().to_vec()).unwrap(), v);
    }

    #[test]
    fn rejects_malformed_lists() {
        let mut t = vocab().tokens().to_vec();
        t.push("a".into());
        assert!(Vocab::from_tokens(t).is_err());
        assert!(Vocab::from_tokens(vec!["<eos>".into()]).is_err());
    }

    #[test]
    fn prompts_render_expected_text() {
        let v = vocab();
        let p = PromptTemplate::render(Task::Asr, None, &v).unwrap();
        assert_eq!(p.text, "Transcribe the speech to text.");
        assert_eq!(p.tokens.len(), 6);
        let p = PromptTemplate::render(Task::Ast, Some(1), &v).unwrap();
        assert_eq!(p.text, "Translate the speech to beta.");
        assert_eq!(p.tokens.len(), 6);
        let p = PromptTemplate::render(Task::AstCot, Some(0), &v).unwrap();
        assert_eq!(p.text, "First transcribe the speech to text, and then translate the speech to alpha.");
        assert_eq!(p.tokens.len(), 15);
        assert!(PromptTemplate::render(Task::Ast, None, &v).is_err());
        assert!(PromptTemplate::render(Task::Ast, Some(9), &v).is_err());
    }

    #[test]
    fn cot_labels_split_back() {
        let v = vocab();
        let l = task_labels(Task::AstCot, "ab cd", Some("ef gh"), &v).unwrap();
        assert_eq!(l.len(), 11);
        assert_eq!(split_segments(&l, &v), vec!["ab cd".to_string(), "ef gh".to_string()]);
        assert!(task_labels(Task::Ast, "ab", None, &v).is_err());
        for t in Task::ALL {
            assert_eq!(Task::parse(t.as_str()).unwrap(), t);
        }
    }
}
