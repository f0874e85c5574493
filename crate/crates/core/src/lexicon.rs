//! Persuasion-trigger lexicon and phrase matching.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{normalize_text, tokenize_sentence};

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Principle {
    Reciprocity,
    Consistency,
    SocialProof,
    Authority,
    Liking,
    Scarcity,
}

impl Principle {
    pub const ALL: [Principle; 6] = [
        Principle::Reciprocity,
        Principle::Consistency,
        Principle::SocialProof,
        Principle::Authority,
        Principle::Liking,
        Principle::Scarcity,
    ];

    /// The three principles counted by the SAC measure.
    pub const SAC: [Principle; 3] = [Principle::Scarcity, Principle::Authority, Principle::Consistency];

    pub fn is_sac(self) -> bool {
        Self::SAC.contains(&self)
    }
}

impl fmt::Display for Principle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Principle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Principle::ALL
            .into_iter()
            .find(|p| p.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown principle `{s}`")))
    }
}

/// Canonical matching form: normalized tokens joined by single spaces and
/// padded with a space on both sides, so substring tests respect token
/// boundaries.
fn canonical(text: &str) -> Option<String> {
    let norm = normalize_text(text).ok()?;
    let toks = tokenize_sentence(&norm.replace('\n', " "));
    (!toks.is_empty()).then(|| format!(" {} ", toks.join(" ")))
}

/// Phrases for each of the six principles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerLexicon {
    phrases: BTreeMap<Principle, Vec<String>>,
    canonical: BTreeMap<Principle, Vec<String>>,
}

impl TriggerLexicon {
    pub fn new(phrases: BTreeMap<Principle, Vec<String>>) -> Result<Self> {
        let mut clean = BTreeMap::new();
        let mut canon = BTreeMap::new();
        for p in Principle::ALL {
            let list = phrases
                .get(&p)
                .ok_or_else(|| Error::Config(format!("lexicon lacks principle {p}")))?;
            if list.is_empty() {
                return Err(Error::Config(format!("lexicon has no phrases for {p}")));
            }
            let mut kept = Vec::with_capacity(list.len());
            let mut keys = Vec::with_capacity(list.len());
            for raw in list {
                let key = canonical(raw).ok_or_else(|| Error::Config(format!("empty phrase under {p}")))?;
                kept.push(key.trim().to_string());
                keys.push(key);
            }
            clean.insert(p, kept);
            canon.insert(p, keys);
        }
        Ok(TriggerLexicon {
            phrases: clean,
            canonical: canon,
        })
    }

    /// The lexicon shipped with the crate.
    pub fn default_lexicon() -> Self {
        Self::from_json(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }

    /// JSON object mapping each principle name to an array of phrases.
    pub fn from_json(json: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(json)?;
        let mut phrases = BTreeMap::new();
        for (k, v) in raw {
            phrases.insert(k.parse::<Principle>()?, v);
        }
        Self::new(phrases)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<String, &Vec<String>> =
            self.phrases.iter().map(|(k, v)| (k.to_string(), v)).collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn phrases(&self, p: Principle) -> &[String] {
        &self.phrases[&p]
    }

    /// Principles with at least one phrase occurring in `sentence`.
    pub fn matches(&self, sentence: &str) -> Vec<Principle> {
        let Some(hay) = canonical(sentence) else {
            return Vec::new();
        };
        self.canonical
            .iter()
            .filter(|(_, keys)| keys.iter().any(|k| hay.contains(k.as_str())))
            .map(|(&p, _)| p)
            .collect()
    }

    pub fn matches_any(&self, sentence: &str) -> bool {
        !self.matches(sentence).is_empty()
    }

    pub fn matches_sac(&self, sentence: &str) -> bool {
        self.matches(sentence).iter().any(|p| p.is_sac())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_lexicon_covers_every_principle() {
        let lex = TriggerLexicon::default_lexicon();
        for p in Principle::ALL {
            assert!(lex.phrases(p).len() >= 10, "{p}");
        }
        assert!(lex.phrases(Principle::Scarcity).iter().any(|s| s == "act now"));
    }

    #[test]
    fn matching_is_case_insensitive_and_token_bounded() {
        let lex = TriggerLexicon::default_lexicon();
        assert_eq!(lex.matches("Please ACT NOW to avoid suspension"), vec![Principle::Scarcity]);
        assert!(!lex.matches_any("contact nowhere"));
        assert!(!lex.matches_any("the agenda for monday is attached."));
        assert!(lex.matches_any("dear friend, hello"));
        assert!(!lex.matches_sac("dear friend, hello"));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let lex = TriggerLexicon::default_lexicon();
        let back = TriggerLexicon::from_json(&lex.to_json().unwrap()).unwrap();
        assert_eq!(lex, back);
        assert!(TriggerLexicon::from_json(r#"{"Scarcity": ["act now"]}"#).is_err());
        assert!(TriggerLexicon::from_json(r#"{"Bogus": ["x"]}"#).is_err());
    }
}
