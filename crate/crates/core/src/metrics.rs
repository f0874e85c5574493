//! Evaluation measures and per-email explanations.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{Principle, TriggerLexicon};
use crate::model::{rank_sentences, SentenceModel};
use crate::text::{Label, PreparedEmail};

/// Top-1 selection and the classifier's verdict on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Top1Prediction {
    pub index: usize,
    pub probabilities: [f64; 2],
    pub label: Label,
}

fn real_mask(email: &PreparedEmail) -> Vec<bool> {
    let n = email.tokens.real_sentence_count();
    (0..email.tokens.max_sentences()).map(|i| i < n).collect()
}

fn argmax_label(p: &[f64; 2]) -> Label {
    if p[1] > p[0] {
        Label::Phishing
    } else {
        Label::Benign
    }
}

fn non_empty<T>(xs: &[T], what: &'static str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::EmptyInput(what));
    }
    Ok(())
}

/// Ranks each email's sentences and classifies on the hard top-1 mask.
pub fn predict_top1<M: SentenceModel + ?Sized>(model: &M, emails: &[&PreparedEmail]) -> Result<Vec<Top1Prediction>> {
    let probs = model.selection_probs(emails)?;
    let mut top = Vec::with_capacity(emails.len());
    for (e, p) in emails.iter().zip(&probs) {
        let r = rank_sentences(p.as_slice(), &real_mask(e), 1);
        let i = *r.first().ok_or_else(|| Error::EmptyEmail(e.id.clone()))?;
        top.push(i);
    }
    let selected: Vec<Vec<usize>> = top.iter().map(|&i| vec![i]).collect();
    let cls = model.classify_selected(emails, &selected)?;
    Ok(top
        .into_iter()
        .zip(cls)
        .map(|(index, probabilities)| Top1Prediction {
            index,
            probabilities,
            label: argmax_label(&probabilities),
        })
        .collect())
}

pub fn accuracy(preds: &[Label], truths: &[Label]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::shape("accuracy", &[preds.len()], &[truths.len()]));
    }
    non_empty(preds, "predictions")?;
    let hits = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// F1 for the phishing class; 0 (with a warning) when precision + recall is 0.
pub fn f1_score(preds: &[Label], truths: &[Label]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::shape("f1_score", &[preds.len()], &[truths.len()]));
    }
    non_empty(preds, "predictions")?;
    let pos = Label::Phishing;
    let tp = preds.iter().zip(truths).filter(|(p, t)| **p == pos && **t == pos).count() as f64;
    let pred_pos = preds.iter().filter(|p| **p == pos).count() as f64;
    let true_pos = truths.iter().filter(|t| **t == pos).count() as f64;
    if tp == 0.0 {
        if pred_pos == 0.0 && true_pos == 0.0 {
            log::warn!("F1 undefined without positive predictions or truths; reporting 0");
        }
        return Ok(0.0);
    }
    let precision = tp / pred_pos;
    let recall = tp / true_pos;
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn label_accuracy<M: SentenceModel + ?Sized>(model: &M, emails: &[&PreparedEmail]) -> Result<f64> {
    non_empty(emails, "evaluation set")?;
    let preds: Vec<Label> = predict_top1(model, emails)?.into_iter().map(|p| p.label).collect();
    let truths: Vec<Label> = emails.iter().map(|e| e.label).collect();
    accuracy(&preds, &truths)
}

fn phishing_only(emails: &[&PreparedEmail]) -> Result<()> {
    non_empty(emails, "phishing set")?;
    if let Some(e) = emails.iter().find(|e| e.label != Label::Phishing) {
        return Err(Error::Config(format!("email {} is not labeled phishing", e.id)));
    }
    Ok(())
}

fn top1_match_rate<M: SentenceModel + ?Sized>(
    model: &M,
    emails: &[&PreparedEmail],
    hit: impl Fn(&str) -> bool,
) -> Result<f64> {
    phishing_only(emails)?;
    let probs = model.selection_probs(emails)?;
    let mut hits = 0usize;
    for (e, p) in emails.iter().zip(&probs) {
        let i = rank_sentences(p.as_slice(), &real_mask(e), 1)[0];
        if hit(&e.sentences[i]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / emails.len() as f64)
}

/// Fraction of phishing emails whose top-1 sentence carries any lexicon phrase.
pub fn cognitive_true_positive<M: SentenceModel + ?Sized>(
    model: &M,
    emails: &[&PreparedEmail],
    lexicon: &TriggerLexicon,
) -> Result<f64> {
    top1_match_rate(model, emails, |s| lexicon.matches_any(s))
}

/// As [`cognitive_true_positive`], restricted to Scarcity, Authority and Consistency.
pub fn sac_score<M: SentenceModel + ?Sized>(model: &M, emails: &[&PreparedEmail], lexicon: &TriggerLexicon) -> Result<f64> {
    top1_match_rate(model, emails, |s| lexicon.matches_sac(s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSentence {
    pub index: usize,
    pub sentence: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub email_id: String,
    pub predicted_label: Label,
    /// `[benign, phishing]`.
    pub probabilities: [f64; 2],
    pub ranking: Vec<RankedSentence>,
    pub top1_principles: Vec<Principle>,
}

pub fn explain_email<M: SentenceModel + ?Sized>(
    model: &M,
    email: &PreparedEmail,
    lexicon: &TriggerLexicon,
    k: usize,
) -> Result<Explanation> {
    if email.tokens.real_sentence_count() == 0 {
        return Err(Error::EmptyEmail(email.id.clone()));
    }
    let p = model.selection_probs(&[email])?.remove(0);
    let ranking = rank_sentences(p.as_slice(), &real_mask(email), k.max(1));
    let top = ranking[0];
    let probabilities = model.classify_selected(&[email], &[vec![top]])?[0];
    Ok(Explanation {
        email_id: email.id.clone(),
        predicted_label: argmax_label(&probabilities),
        probabilities,
        ranking: ranking
            .iter()
            .take(k)
            .map(|&i| RankedSentence {
                index: i,
                sentence: email.sentences[i].clone(),
                score: p.as_slice()[i],
            })
            .collect(),
        top1_principles: lexicon.matches(&email.sentences[top]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,value,n\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.metric, r.value, r.n));
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(metrics_csv(rows).as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    use Label::{Benign as B, Phishing as P};

    #[test]
    fn accuracy_counts() {
        assert!((accuracy(&[P, B, P], &[P, P, P]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[P, B], &[P, B]).unwrap(), 1.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn f1_hand_values() {
        assert_eq!(f1_score(&[P, B], &[P, B]).unwrap(), 1.0);
        assert!((f1_score(&[P, P, B, B], &[P, B, P, B]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(f1_score(&[B, B], &[B, B]).unwrap(), 0.0);
        assert!(f1_score(&[P], &[P, B]).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = [MetricRow {
            metric: "label_accuracy".into(),
            value: 0.5,
            n: 4,
        }];
        assert_eq!(metrics_csv(&rows), "metric,value,n\nlabel_accuracy,0.5,4\n");
    }
}
