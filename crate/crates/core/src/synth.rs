//! Seeded synthetic corpus with planted trigger sentences.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{Principle, TriggerLexicon};
use crate::model::{rank_sentences, SentenceModel};
use crate::seed::derive_rng;
use crate::text::{Label, PreparedEmail, RawEmail};

const NOUNS: &[&str] = &[
    "report", "invoice", "statement", "agenda", "budget", "proposal", "draft", "contract", "slides",
    "newsletter", "order", "receipt", "account summary", "profile", "schedule", "password", "payment",
    "spreadsheet", "calendar", "presentation",
];
const EVENTS: &[&str] = &[
    "meeting", "workshop", "review", "call", "kickoff", "training session", "planning session", "team lunch",
    "conference", "webinar", "offsite", "standup",
];
const TEAMS: &[&str] = &[
    "finance team", "sales team", "design group", "support desk", "project team", "hr office",
    "marketing team", "board", "billing office", "operations group",
];
const DAYS: &[&str] = &["monday", "tuesday", "wednesday", "thursday", "friday"];

const FILLERS: &[&str] = &[
    "the {noun} for the {event} is attached.",
    "let me know if the {noun} looks right to you.",
    "we moved the {event} to {day} afternoon.",
    "thanks for sending the {noun} yesterday.",
    "i will review the {noun} and reply by {day}.",
    "the {team} shared notes from the {event}.",
    "please find the updated {noun} in the shared folder.",
    "our {team} will join the {event} on {day}.",
    "your {noun} was received by the {team}.",
    "can we discuss the {noun} at the next {event}?",
    "i added a few comments to the {noun}.",
    "the {noun} from {day} has a small typo.",
    "lunch with the {team} is planned for {day}.",
    "the {team} updated the {noun} this morning.",
    "your account page now shows the new {noun}.",
    "the {event} notes mention the {noun} twice.",
    "could you print the {noun} before the {event}?",
    "we can talk about your {noun} after the {event}.",
    "the {team} asked for a copy of the {noun}.",
    "see you at the {event} on {day}.",
];

const TRIGGERS: &[&str] = &[
    "{phrase} about the {noun} before {day}.",
    "the {team} says {phrase} for your {noun}.",
    "please {phrase} regarding the {event}.",
    "{phrase}, the {noun} for the {event} is waiting.",
    "your {noun} needs attention, {phrase}.",
    "regarding your account, {phrase} with the {team}.",
    "we note {phrase} on the {noun} from {day}.",
    "this {event} message is {phrase} for your {noun}.",
];

fn default_weights() -> BTreeMap<Principle, f64> {
    use Principle::*;
    BTreeMap::from([
        (Scarcity, 0.25),
        (Authority, 0.25),
        (Consistency, 0.2),
        (Reciprocity, 0.1),
        (SocialProof, 0.1),
        (Liking, 0.1),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_emails: usize,
    pub phishing_ratio: f64,
    pub min_sentences: usize,
    pub max_sentences: usize,
    /// Relative frequency of each principle among planted triggers.
    pub principle_weights: BTreeMap<Principle, f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_emails: 2000,
            phishing_ratio: 0.5,
            min_sentences: 4,
            max_sentences: 12,
            principle_weights: default_weights(),
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_emails == 0 {
            return Err(Error::Config("n_emails must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.phishing_ratio) {
            return Err(Error::Config(format!(
                "phishing_ratio must lie in [0, 1], got {}",
                self.phishing_ratio
            )));
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return Err(Error::Config(format!(
                "invalid sentence range [{}, {}]",
                self.min_sentences, self.max_sentences
            )));
        }
        if self.principle_weights.values().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.principle_weights.values().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("principle weights must be non-negative with a positive sum".into()));
        }
        Ok(())
    }

    pub fn n_phishing(&self) -> usize {
        (self.n_emails as f64 * self.phishing_ratio).round() as usize
    }
}

/// Sidecar record: where the planted trigger sits, `-1` for benign emails.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: String,
    pub trigger_index: i64,
    pub principle: Option<Principle>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthEmail {
    pub email: RawEmail,
    pub sentences: Vec<String>,
    pub truth: GroundTruth,
}

fn fill<R: Rng + ?Sized>(template: &str, phrase: &str, rng: &mut R) -> String {
    let mut out = template.replace("{phrase}", phrase);
    for (slot, pool) in [("{noun}", NOUNS), ("{event}", EVENTS), ("{team}", TEAMS), ("{day}", DAYS)] {
        while out.contains(slot) {
            out = out.replacen(slot, pool.choose(rng).expect("non-empty pool"), 1);
        }
    }
    out
}

fn filler<R: Rng + ?Sized>(lexicon: &TriggerLexicon, rng: &mut R) -> Result<String> {
    for _ in 0..100 {
        let s = fill(FILLERS.choose(rng).expect("templates"), "", rng);
        if !lexicon.matches_any(&s) {
            return Ok(s);
        }
    }
    Err(Error::Config("lexicon matches every filler template".into()))
}

fn trigger<R: Rng + ?Sized>(lexicon: &TriggerLexicon, principle: Principle, rng: &mut R) -> Result<String> {
    for _ in 0..100 {
        let phrase = lexicon.phrases(principle).choose(rng).expect("validated lexicon");
        let s = fill(TRIGGERS.choose(rng).expect("templates"), phrase, rng);
        if lexicon.matches(&s).contains(&principle) {
            return Ok(s);
        }
    }
    Err(Error::Config(format!("cannot build a sentence matching {principle}")))
}

pub fn generate_corpus(config: &SynthConfig) -> Result<Vec<SynthEmail>> {
    generate_corpus_with(config, &TriggerLexicon::default_lexicon())
}

pub fn generate_corpus_with(config: &SynthConfig, lexicon: &TriggerLexicon) -> Result<Vec<SynthEmail>> {
    config.validate()?;
    let mut labels = vec![Label::Benign; config.n_emails];
    labels[..config.n_phishing()].fill(Label::Phishing);
    labels.shuffle(&mut derive_rng(config.seed, "synth-labels", 0));
    let principles: Vec<Principle> = config.principle_weights.keys().copied().collect();
    let weights = WeightedIndex::new(config.principle_weights.values().copied())
        .map_err(|e| Error::Config(format!("principle weights: {e}")))?;

    let width = config.n_emails.to_string().len().max(6);
    let mut out = Vec::with_capacity(config.n_emails);
    for (i, label) in labels.into_iter().enumerate() {
        let mut rng = derive_rng(config.seed, "synth-email", i as u64);
        let n = rng.gen_range(config.min_sentences..=config.max_sentences);
        let mut sentences = Vec::with_capacity(n);
        let mut truth_index = -1;
        let mut principle = None;
        let planted = if label == Label::Phishing {
            let p = principles[weights.sample(&mut rng)];
            principle = Some(p);
            let pos = rng.gen_range(0..n);
            truth_index = pos as i64;
            Some((pos, trigger(lexicon, p, &mut rng)?))
        } else {
            None
        };
        for j in 0..n {
            match &planted {
                Some((pos, s)) if *pos == j => sentences.push(s.clone()),
                _ => sentences.push(filler(lexicon, &mut rng)?),
            }
        }
        let id = format!("synth-{i:0width$}");
        out.push(SynthEmail {
            email: RawEmail {
                id: id.clone(),
                text: sentences.join(" "),
                label,
            },
            sentences,
            truth: GroundTruth {
                id,
                trigger_index: truth_index,
                principle,
            },
        });
    }
    Ok(out)
}

pub fn write_sidecar(path: &Path, truths: &[GroundTruth]) -> Result<()> {
    let mut buf = String::new();
    for t in truths {
        buf.push_str(&serde_json::to_string(t)?);
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_sidecar(path: &Path) -> Result<Vec<GroundTruth>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            kind: "sidecar line",
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Fraction of emails with a planted trigger whose top-1 sentence is that trigger.
/// Emails without a sidecar entry or with index `-1` are skipped.
pub fn localization_accuracy<M: SentenceModel + ?Sized>(
    model: &M,
    emails: &[&PreparedEmail],
    truth: &HashMap<String, GroundTruth>,
) -> Result<f64> {
    let planted: Vec<(&PreparedEmail, usize)> = emails
        .iter()
        .filter_map(|e| {
            let t = truth.get(&e.id)?;
            (t.trigger_index >= 0).then_some((*e, t.trigger_index as usize))
        })
        .collect();
    if planted.is_empty() {
        return Err(Error::EmptyInput("planted emails"));
    }
    let refs: Vec<&PreparedEmail> = planted.iter().map(|(e, _)| *e).collect();
    let probs = model.selection_probs(&refs)?;
    let hits = planted
        .iter()
        .zip(&probs)
        .filter(|((e, idx), p)| {
            let real: Vec<bool> = (0..p.len()).map(|i| i < e.tokens.real_sentence_count()).collect();
            rank_sentences(p.as_slice(), &real, 1).first() == Some(idx)
        })
        .count();
    Ok(hits as f64 / planted.len() as f64)
}
