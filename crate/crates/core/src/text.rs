//! Email ingestion: normalization, sentence splitting, tokenization,
//! vocabulary construction and fixed-shape encoding.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::PAD_ID;

/// Sentences kept per email.
pub const MAX_SENTENCES: usize = 100;
/// Tokens kept per sentence.
pub const TOKENS_PER_SENTENCE: usize = 30;
pub const VOCAB_CAP: usize = 20_000;

pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Label {
    Benign = 0,
    Phishing = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Benign),
            1 => Some(Label::Phishing),
            _ => None,
        }
    }
}

impl TryFrom<i64> for Label {
    type Error = Error;

    fn try_from(v: i64) -> Result<Self> {
        match v {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Phishing),
            other => Err(Error::InvalidLabel(other)),
        }
    }
}

impl From<Label> for i64 {
    fn from(l: Label) -> i64 {
        l as i64
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Label::Benign => "benign",
            Label::Phishing => "phishing",
        })
    }
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEmail {
    pub id: String,
    pub text: String,
    pub label: Label,
}

/// Lowercases, strips markup tags and non-ASCII characters, and collapses
/// whitespace. Line breaks survive (as single `\n`) so the sentence splitter
/// can use them; every other whitespace run becomes one space.
pub fn normalize_text(raw: &str) -> Result<String> {
    let mut stripped = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(open) = rest.find('<') {
        match rest[open..].find('>') {
            Some(close) => {
                stripped.push_str(&rest[..open]);
                stripped.push(' ');
                rest = &rest[open + close + 1..];
            }
            None => break,
        }
    }
    stripped.push_str(rest);

    let mut out = String::with_capacity(stripped.len());
    let mut pending_space = false;
    let mut pending_newline = false;
    for ch in stripped.chars().filter(char::is_ascii) {
        if ch == '\n' {
            pending_newline = true;
        } else if ch.is_ascii_whitespace() || ch.is_ascii_control() {
            pending_space = true;
        } else {
            if !out.is_empty() {
                if pending_newline {
                    out.push('\n');
                } else if pending_space {
                    out.push(' ');
                }
            }
            pending_space = false;
            pending_newline = false;
            out.push(ch.to_ascii_lowercase());
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyEmail(String::new()));
    }
    Ok(out)
}

/// Splits at `.`, `!` or `?` followed by whitespace or end of text, and at
/// line breaks. Terminators stay with their sentence.
pub fn split_sentences(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(ch) = chars.next() {
        if ch == '\n' {
            push_trimmed(&mut out, &mut current);
            continue;
        }
        current.push(ch);
        if matches!(ch, '.' | '!' | '?') && chars.peek().map_or(true, |c| c.is_whitespace()) {
            push_trimmed(&mut out, &mut current);
        }
    }
    push_trimmed(&mut out, &mut current);
    if out.is_empty() {
        return Err(Error::EmptyEmail(String::new()));
    }
    Ok(out)
}

fn push_trimmed(out: &mut Vec<String>, current: &mut String) {
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    current.clear();
}

/// Whitespace tokenization with every ASCII punctuation character split off
/// as its own token.
pub fn tokenize_sentence(sentence: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in sentence.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Normalized sentences of an email, each paired with its tokens.
/// Sentences without tokens are dropped.
pub fn segment_email(email: &RawEmail) -> Result<Vec<(String, Vec<String>)>> {
    let norm = normalize_text(&email.text).map_err(|_| Error::EmptyEmail(email.id.clone()))?;
    let sentences = split_sentences(&norm).map_err(|_| Error::EmptyEmail(email.id.clone()))?;
    let out: Vec<_> = sentences
        .into_iter()
        .map(|s| {
            let toks = tokenize_sentence(&s);
            (s, toks)
        })
        .filter(|(_, t)| !t.is_empty())
        .collect();
    if out.is_empty() {
        return Err(Error::EmptyEmail(email.id.clone()));
    }
    Ok(out)
}

/// Token ↔ id map. Ids are contiguous; `0` is padding and `1` unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Ranks tokens of the given (training) emails by frequency, ties broken
    /// lexicographically, keeping the top `cap - 2`.
    pub fn build<'e>(emails: impl IntoIterator<Item = &'e RawEmail>, cap: usize) -> Result<Self> {
        if cap < 2 {
            return Err(Error::Config(format!("vocabulary cap must be at least 2, got {cap}")));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for email in emails {
            let Ok(sentences) = segment_email(email) else { continue };
            for (_, toks) in sentences {
                for t in toks {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyInput("no tokens to build a vocabulary from"));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap - 2);
        Self::from_tokens(
            [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
                .into_iter()
                .chain(ranked.into_iter().map(|(t, _)| t))
                .collect(),
        )
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::Config("vocabulary must start with <pad>, <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Fixed `L×T` token-id matrix of one email.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedEmail {
    ids: Vec<usize>,
    max_sentences: usize,
    tokens_per_sentence: usize,
    real_sentence_count: usize,
}

impl TokenizedEmail {
    pub fn row(&self, i: usize) -> &[usize] {
        let t = self.tokens_per_sentence;
        &self.ids[i * t..(i + 1) * t]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.ids.chunks_exact(self.tokens_per_sentence)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn max_sentences(&self) -> usize {
        self.max_sentences
    }

    pub fn tokens_per_sentence(&self) -> usize {
        self.tokens_per_sentence
    }

    pub fn real_sentence_count(&self) -> usize {
        self.real_sentence_count
    }

    /// Number of non-pad tokens in sentence `i` (pads only trail).
    pub fn sentence_len(&self, i: usize) -> usize {
        self.row(i).iter().take_while(|&&id| id != PAD_ID).count()
    }
}

/// An email ready for the model: label, kept sentence texts and token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEmail {
    pub id: String,
    pub label: Label,
    pub sentences: Vec<String>,
    pub tokens: TokenizedEmail,
}

/// Pads/truncates an email to `max_sentences` rows of `tokens_per_sentence` ids.
pub fn encode_email(
    email: &RawEmail,
    vocab: &Vocabulary,
    max_sentences: usize,
    tokens_per_sentence: usize,
) -> Result<PreparedEmail> {
    if max_sentences == 0 || tokens_per_sentence == 0 {
        return Err(Error::Config("sentence and token budgets must be positive".into()));
    }
    let mut sentences = segment_email(email)?;
    sentences.truncate(max_sentences);
    let mut ids = vec![PAD_ID; max_sentences * tokens_per_sentence];
    for (row, (_, toks)) in ids.chunks_exact_mut(tokens_per_sentence).zip(&sentences) {
        for (slot, tok) in row.iter_mut().zip(toks) {
            *slot = vocab.id(tok);
        }
    }
    Ok(PreparedEmail {
        id: email.id.clone(),
        label: email.label,
        tokens: TokenizedEmail {
            ids,
            max_sentences,
            tokens_per_sentence,
            real_sentence_count: sentences.len(),
        },
        sentences: sentences.into_iter().map(|(s, _)| s).collect(),
    })
}

/// Reads a JSON-lines corpus. Blank lines are skipped; unknown fields ignored.
pub fn read_corpus(path: &Path) -> Result<Vec<RawEmail>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let email: RawEmail = serde_json::from_str(&line).map_err(|e| Error::Parse {
            kind: "corpus line",
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        out.push(email);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, emails: &[RawEmail]) -> Result<()> {
    let mut buf = String::new();
    for e in emails {
        buf.push_str(&serde_json::to_string(e)?);
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Drops exact duplicates (same normalized text), keeping the first occurrence.
pub fn dedup_exact(emails: Vec<RawEmail>) -> Vec<RawEmail> {
    let mut seen = HashSet::new();
    let before = emails.len();
    let out: Vec<RawEmail> = emails
        .into_iter()
        .filter(|e| seen.insert(normalize_text(&e.text).unwrap_or_default()))
        .collect();
    if out.len() < before {
        log::warn!("dropped {} duplicate emails", before - out.len());
    }
    out
}
