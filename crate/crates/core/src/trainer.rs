//! The alternating training loop, dataset splits and checkpoint selection.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, f1_score, predict_top1};
use crate::model::{BindSpec, BoundModel, Model, ModelConfig, ModelParams, ParamGroup};
use crate::nn::{clip_global_norm, AdamConfig, AdamState};
use crate::objectives::{joint_loss, random_mask_loss, LossBreakdown, ObjectiveConfig};
use crate::seed::derive_rng;
use crate::text::{dedup_exact, encode_email, Label, PreparedEmail, RawEmail, Vocabulary, VOCAB_CAP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub sigma: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_threshold: f64,
    pub seed: u64,
    pub vocab_cap: usize,
    /// Runs the disjoint random-mask classifier step before each joint step.
    pub use_ddm: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-2,
            sigma: 0.1,
            tau: 0.5,
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 10,
            clip_threshold: 5.0,
            seed: 7,
            vocab_cap: VOCAB_CAP,
            use_ddm: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda,
            sigma: self.sigma,
            tau: self.tau,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective().validate()?;
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(Error::Config(format!("clip threshold must be positive, got {}", self.clip_threshold)));
        }
        if self.vocab_cap < 3 {
            return Err(Error::Config("vocab_cap must leave room for real tokens".into()));
        }
        Ok(())
    }
}

/// Train/validation/test email ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

pub const MIN_SPLIT_SIZE: usize = 10;

/// Label-stratified 80/10/10 split. Each class is shuffled and cut on its
/// own; ids keep corpus order within each partition.
pub fn split_dataset(corpus: &[RawEmail], seed: u64) -> Result<SplitDataset> {
    if corpus.len() < MIN_SPLIT_SIZE {
        return Err(Error::Config(format!(
            "corpus has {} emails, need at least {MIN_SPLIT_SIZE}",
            corpus.len()
        )));
    }
    let mut part = vec![0u8; corpus.len()];
    for label in [Label::Benign, Label::Phishing] {
        let mut idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].label == label).collect();
        idx.shuffle(&mut derive_rng(seed, "split", label.index() as u64));
        let n = idx.len() as f64;
        let n_val = (0.1 * n).round() as usize;
        let n_test = (0.1 * n).round() as usize;
        for &i in &idx[..n_val] {
            part[i] = 1;
        }
        for &i in &idx[n_val..n_val + n_test] {
            part[i] = 2;
        }
    }
    let pick = |k: u8| -> Vec<String> {
        corpus
            .iter()
            .zip(&part)
            .filter(|(_, &p)| p == k)
            .map(|(e, _)| e.id.clone())
            .collect()
    };
    Ok(SplitDataset {
        train: pick(0),
        validation: pick(1),
        test: pick(2),
        seed,
    })
}

/// One row of the training log. Step rows carry losses and norms, epoch
/// rows carry the validation accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: Option<usize>,
    pub ce: Option<f64>,
    pub ib_penalty: Option<f64>,
    pub total: Option<f64>,
    pub random_mask_loss: Option<f64>,
    pub grad_norm_pre: Option<f64>,
    pub grad_norm_post: Option<f64>,
    pub val_accuracy: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,step,ce,ib_penalty,total,random_mask_loss,grad_norm_pre,grad_norm_post,val_accuracy";

pub fn log_csv(rows: &[LogRow]) -> String {
    fn cell<T: ToString>(v: &Option<T>) -> String {
        v.as_ref().map(T::to_string).unwrap_or_default()
    }
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            cell(&r.step),
            cell(&r.ce),
            cell(&r.ib_penalty),
            cell(&r.total),
            cell(&r.random_mask_loss),
            cell(&r.grad_norm_pre),
            cell(&r.grad_norm_post),
            cell(&r.val_accuracy),
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointStats {
    pub breakdown: LossBreakdown,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
}

/// Parameters plus the two optimizer states and the sampling stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    disjoint_opt: AdamState,
    joint_opt: AdamState,
    rng: ChaCha8Rng,
}

fn sizes(params: &ModelParams, keep: impl Fn(ParamGroup) -> bool) -> Vec<usize> {
    params
        .named()
        .into_iter()
        .filter(|(_, g, _)| keep(*g))
        .map(|(_, _, t)| t.len())
        .collect()
}

fn check_finite(v: f64, epoch: usize, step: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            epoch,
            step,
            detail: format!("{what} = {v}"),
        })
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config.model, vocab_size, &mut derive_rng(config.seed, "init", 0))?;
        Ok(Self::with_params(config, params))
    }

    pub fn with_params(config: TrainConfig, params: ModelParams) -> Self {
        let adam = config.adam();
        Trainer {
            disjoint_opt: AdamState::new(adam, &sizes(&params, |g| g == ParamGroup::Classifier)),
            joint_opt: AdamState::new(adam, &sizes(&params, |_| true)),
            rng: derive_rng(config.seed, "sampling", 0),
            config,
            params,
        }
    }

    pub fn model(&self) -> Model {
        Model {
            config: self.config.model.clone(),
            params: self.params.clone(),
        }
    }

    /// Random-mask update of the classifier alone. The selector is not bound
    /// and the encoder is frozen, so neither moves.
    pub fn train_step_disjoint(&mut self, batch: &[&PreparedEmail]) -> Result<StepStats> {
        let oc = self.config.objective();
        let (loss, mut grads) = {
            let mut g = Graph::new();
            let spec = BindSpec {
                encoder: false,
                selector: None,
                classifier: true,
            };
            let bound = BoundModel::bind_with(&mut g, &self.params, spec);
            let loss = random_mask_loss(&mut g, &bound, batch, &self.config.model, &oc, &mut self.rng, None)?;
            let mut grads = g.backward(loss)?;
            let owned: Vec<Option<Vec<f64>>> = bound
                .vars(&self.params)
                .into_iter()
                .zip(self.params.named())
                .filter(|(_, (_, group, _))| *group == ParamGroup::Classifier)
                .map(|(v, _)| v.and_then(|v| grads.take(v)))
                .collect();
            (g.value(loss)[0], owned)
        };
        let (pre, post) = clip_global_norm(&mut grads, self.config.clip_threshold)?;
        let mut tensors: Vec<_> = self
            .params
            .tensors_mut()
            .into_iter()
            .filter(|(g, _)| *g == ParamGroup::Classifier)
            .map(|(_, t)| t)
            .collect();
        fill_missing(&mut grads, &tensors);
        self.disjoint_opt.step(&mut tensors, &grads)?;
        Ok(StepStats {
            loss,
            grad_norm_pre: pre,
            grad_norm_post: post,
        })
    }

    /// Joint update of every parameter on the selection objective.
    pub fn train_step_joint(&mut self, batch: &[&PreparedEmail]) -> Result<JointStats> {
        let oc = self.config.objective();
        let (breakdown, mut grads) = {
            let mut g = Graph::new();
            let bound = BoundModel::bind(&mut g, &self.params, true, true);
            let pass = joint_loss(&mut g, &bound, batch, &self.config.model, &oc, &mut self.rng)?;
            let mut grads = g.backward(pass.total)?;
            let owned: Vec<Option<Vec<f64>>> = bound
                .vars(&self.params)
                .into_iter()
                .map(|v| v.and_then(|v| grads.take(v)))
                .collect();
            (pass.breakdown, owned)
        };
        let (pre, post) = clip_global_norm(&mut grads, self.config.clip_threshold)?;
        let mut tensors: Vec<_> = self.params.tensors_mut().into_iter().map(|(_, t)| t).collect();
        fill_missing(&mut grads, &tensors);
        self.joint_opt.step(&mut tensors, &grads)?;
        Ok(JointStats {
            breakdown,
            grad_norm_pre: pre,
            grad_norm_post: post,
        })
    }
}

/// A parameter the loss does not reach gets a zero gradient.
fn fill_missing(grads: &mut [Option<Vec<f64>>], tensors: &[&mut crate::autodiff::Tensor]) {
    for (g, t) in grads.iter_mut().zip(tensors) {
        if g.is_none() {
            *g = Some(vec![0.0; t.len()]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub accuracy: f64,
    pub f1: f64,
    pub n: usize,
}

/// Hard top-1 accuracy and F1 in inference mode.
pub fn validate_checkpoint(model: &Model, emails: &[&PreparedEmail]) -> Result<ValidationRecord> {
    if emails.is_empty() {
        return Err(Error::EmptyInput("validation split"));
    }
    let preds: Vec<Label> = predict_top1(model, emails)?.into_iter().map(|p| p.label).collect();
    let truths: Vec<Label> = emails.iter().map(|e| e.label).collect();
    Ok(ValidationRecord {
        accuracy: accuracy(&preds, &truths)?,
        f1: f1_score(&preds, &truths)?,
        n: emails.len(),
    })
}

/// Encoded corpus partitions sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct PreparedSplits {
    pub split: SplitDataset,
    pub vocab: Vocabulary,
    pub train: Vec<PreparedEmail>,
    pub validation: Vec<PreparedEmail>,
    pub test: Vec<PreparedEmail>,
}

/// Deduplicates, splits and encodes a corpus; the vocabulary comes from the
/// training partition only.
pub fn prepare_splits(corpus: &[RawEmail], config: &TrainConfig) -> Result<PreparedSplits> {
    let corpus = dedup_exact(corpus.to_vec());
    let split = split_dataset(&corpus, crate::seed::derive_seed(config.seed, "split", 0))?;
    let by_id: HashMap<&str, &RawEmail> = corpus.iter().map(|e| (e.id.as_str(), e)).collect();
    let raws = |ids: &[String]| -> Vec<&RawEmail> { ids.iter().map(|id| by_id[id.as_str()]).collect() };
    let vocab = Vocabulary::build(raws(&split.train), config.vocab_cap)?;
    let encode = |ids: &[String]| -> Result<Vec<PreparedEmail>> {
        raws(ids)
            .into_iter()
            .map(|e| {
                encode_email(
                    e,
                    &vocab,
                    config.model.max_sentences,
                    config.model.tokens_per_sentence,
                )
            })
            .collect()
    };
    Ok(PreparedSplits {
        train: encode(&split.train)?,
        validation: encode(&split.validation)?,
        test: encode(&split.test)?,
        split,
        vocab,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub log: Vec<LogRow>,
}

/// Runs the configured number of epochs over `train`, keeping the
/// parameters with the highest validation accuracy (earliest on ties).
pub fn train(config: &TrainConfig, vocab_size: usize, train: &[PreparedEmail], validation: &[PreparedEmail]) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    let mut trainer = Trainer::new(config.clone(), vocab_size)?;
    let val: Vec<&PreparedEmail> = validation.iter().collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut derive_rng(config.seed, "shuffle", epoch as u64));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreparedEmail> = chunk.iter().map(|&i| &train[i]).collect();
            step += 1;
            let rm = if config.use_ddm {
                let s = trainer.train_step_disjoint(&batch)?;
                check_finite(s.loss, epoch, step, "random_mask_loss")?;
                Some(s.loss)
            } else {
                None
            };
            let j = trainer.train_step_joint(&batch)?;
            check_finite(j.breakdown.total, epoch, step, "total loss")?;
            check_finite(j.grad_norm_pre, epoch, step, "gradient norm")?;
            log.push(LogRow {
                epoch,
                step: Some(step),
                ce: Some(j.breakdown.ce),
                ib_penalty: Some(j.breakdown.ib_penalty),
                total: Some(j.breakdown.total),
                random_mask_loss: rm,
                grad_norm_pre: Some(j.grad_norm_pre),
                grad_norm_post: Some(j.grad_norm_post),
                val_accuracy: None,
            });
        }
        let acc = if val.is_empty() {
            0.0
        } else {
            validate_checkpoint(&trainer.model(), &val)?.accuracy
        };
        log::info!("epoch {epoch}: validation accuracy {acc:.4}");
        log.push(LogRow {
            epoch,
            step: None,
            ce: None,
            ib_penalty: None,
            total: None,
            random_mask_loss: None,
            grad_norm_pre: None,
            grad_norm_post: None,
            val_accuracy: Some(acc),
        });
        if best.as_ref().map_or(true, |(_, b, _)| acc > *b) {
            best = Some((epoch, acc, trainer.params.clone()));
        }
    }
    let (best_epoch, best_val_accuracy, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: Model {
            config: config.model.clone(),
            params,
        },
        best_epoch,
        best_val_accuracy,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: usize, phishing: usize) -> Vec<RawEmail> {
        (0..n)
            .map(|i| RawEmail {
                id: format!("e{i}"),
                text: format!("message number {i}."),
                label: if i < phishing { Label::Phishing } else { Label::Benign },
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let c = corpus(100, 50);
        let s = split_dataset(&c, 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s, split_dataset(&c, 3).unwrap());
        assert_ne!(s, split_dataset(&c, 4).unwrap());
        assert!(split_dataset(&corpus(9, 4), 0).is_err());
    }

    #[test]
    fn split_is_stratified_partition() {
        let c = corpus(1000, 500);
        let s = split_dataset(&c, 11).unwrap();
        let mut all: Vec<&String> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 1000);
        let phish = |ids: &[String]| {
            ids.iter().filter(|id| id[1..].parse::<usize>().unwrap() < 500).count() as f64 / ids.len() as f64
        };
        for ids in [&s.train, &s.validation, &s.test] {
            assert!((phish(ids) - 0.5).abs() <= 0.02);
        }
    }

    #[test]
    fn log_csv_leaves_missing_cells_empty() {
        let rows = [LogRow {
            epoch: 1,
            step: None,
            ce: None,
            ib_penalty: None,
            total: None,
            random_mask_loss: None,
            grad_norm_pre: None,
            grad_norm_post: None,
            val_accuracy: Some(0.5),
        }];
        assert_eq!(log_csv(&rows), format!("{LOG_HEADER}\n1,,,,,,,,0.5\n"));
    }
}
