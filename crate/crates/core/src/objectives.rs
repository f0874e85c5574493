//! Training losses.
//!
//! The joint objective is minimized in the form
//!
//! ```text
//! mean_b CE(y_b, f(X_b ⊙ z_b))  +  λ · mean_b Σ_i p_bi · ‖x_bi‖² / (2σ²)
//! ```
//!
//! where `z_b` is a relaxed Bernoulli(`p_b`) draw. The second term is the
//! Gaussian-prior KL approximation for the compression of `X` into `X ⊙ z`;
//! its additive `ln σ + σ²/2` part carries no gradient and is dropped.
//! The data-distribution loss replaces `z` with a relaxed Bernoulli(0.5)
//! mask and so never touches the selector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{
    apply_mask, classify, encode_sentences, sample_selection_mask, sample_selection_mask_with_noise,
    selection_probs, BoundModel, EncodedBatch, GumbelNoise, ModelConfig, PROB_EPS,
};
use crate::text::{Label, PreparedEmail};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Weight of the compression penalty.
    pub lambda: f64,
    /// Prior scale.
    pub sigma: f64,
    /// Gumbel-softmax temperature, shared by both masks.
    pub tau: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: 1e-2,
            sigma: 0.1,
            tau: 0.5,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ib_penalty: f64,
    pub total: f64,
    pub lambda: f64,
    pub sigma: f64,
}

/// `-ln pred[y]` with the probability clamped to `[1e-12, 1]`.
pub fn cross_entropy(pred: &[f64], y: usize) -> Result<f64> {
    let p = pred.get(y).ok_or(Error::InvalidLabel(y as i64))?;
    Ok(-p.clamp(PROB_EPS, 1.0).ln())
}

/// `Σ_i p_i ‖x_i‖² / (2σ²)` for one email given its sentence rows.
pub fn ib_penalty(p: &[f64], rows: &[Vec<f64>], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    if p.len() != rows.len() {
        return Err(Error::shape("ib_penalty", &[p.len()], &[rows.len()]));
    }
    let s: f64 = p
        .iter()
        .zip(rows)
        .map(|(p, x)| p * x.iter().map(|v| v * v).sum::<f64>())
        .sum();
    Ok(s / (2.0 * sigma * sigma))
}

/// Batch-mean cross-entropy of class probabilities `[B × 2]`.
pub fn cross_entropy_batch(g: &mut Graph<'_>, probs: Var, labels: &[Label]) -> Result<Var> {
    let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let picked = g.pick(probs, &idx)?;
    let clamped = g.clamp(picked, PROB_EPS, 1.0);
    let logs = g.log(clamped);
    let mean = g.mean(logs);
    Ok(g.neg(mean))
}

/// Batch-mean compression penalty for probabilities `p [B × L]`.
pub fn ib_penalty_batch(g: &mut Graph<'_>, p: Var, batch: &EncodedBatch, sigma: f64) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let sq = g.square(batch.x);
    let norms = g.sum_last_axis(sq)?;
    let p_shape = g.shape(p).to_vec();
    let norms = g.reshape(norms, &p_shape)?;
    let weighted = g.mul(p, norms)?;
    let total = g.sum(weighted);
    Ok(g.affine(total, 1.0 / (2.0 * sigma * sigma * batch.batch as f64), 0.0))
}

/// Test and diagnostic knobs for [`joint_loss_with`].
#[derive(Debug, Clone, Default)]
pub struct JointOptions {
    /// Fixed Gumbel noise `[B × L]` instead of fresh draws.
    pub noise: Option<GumbelNoise>,
    /// Adds the gradient-free prior constant `L·(ln σ + σ²/2)` to the penalty.
    pub include_prior_constant: bool,
}

/// Graph handles produced by a joint-loss pass.
#[derive(Debug, Clone)]
pub struct JointPass {
    pub total: Var,
    pub ce: Var,
    pub ib_penalty: Var,
    pub probs: Var,
    pub encoded: EncodedBatch,
    pub breakdown: LossBreakdown,
}

fn check_batch(emails: &[&PreparedEmail]) -> Result<()> {
    if emails.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    Ok(())
}

pub fn joint_loss<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    model: &BoundModel,
    emails: &[&PreparedEmail],
    mc: &ModelConfig,
    oc: &ObjectiveConfig,
    rng: &mut R,
) -> Result<JointPass> {
    joint_loss_with(g, model, emails, mc, oc, rng, &JointOptions::default())
}

pub fn joint_loss_with<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    model: &BoundModel,
    emails: &[&PreparedEmail],
    mc: &ModelConfig,
    oc: &ObjectiveConfig,
    rng: &mut R,
    opts: &JointOptions,
) -> Result<JointPass> {
    check_batch(emails)?;
    oc.validate()?;
    let selector = model
        .selector
        .as_deref()
        .ok_or_else(|| Error::Config("joint loss needs the selector bound".into()))?;
    let x = encode_sentences(g, &model.encoder, emails, mc, true, rng)?;
    let p = selection_probs(g, selector, &x, mc, true, rng)?;
    let z = match &opts.noise {
        Some(noise) => sample_selection_mask_with_noise(g, p, oc.tau, noise)?,
        None => sample_selection_mask(g, p, oc.tau, rng)?,
    };
    let masked = apply_mask(g, &x, z)?;
    let probs = classify(g, &model.classifier, masked, &x, mc, true, rng)?;
    let labels: Vec<Label> = emails.iter().map(|e| e.label).collect();
    let ce = cross_entropy_batch(g, probs, &labels)?;
    let mut ib = ib_penalty_batch(g, p, &x, oc.sigma)?;
    if opts.include_prior_constant {
        let c = mc.max_sentences as f64 * (oc.sigma.ln() + 0.5 * oc.sigma * oc.sigma);
        ib = g.affine(ib, 1.0, c);
    }
    let weighted = g.affine(ib, oc.lambda, 0.0);
    let total = g.add(ce, weighted)?;
    let ce_v = g.value(ce)[0];
    let ib_v = g.value(ib)[0];
    Ok(JointPass {
        total,
        ce,
        ib_penalty: ib,
        probs: p,
        encoded: x,
        breakdown: LossBreakdown {
            ce: ce_v,
            ib_penalty: ib_v,
            total: g.value(total)[0],
            lambda: oc.lambda,
            sigma: oc.sigma,
        },
    })
}

/// Batch-mean cross-entropy of the classifier on relaxed Bernoulli(0.5)
/// masked inputs. `mask` overrides the random draw (`[B × L]`).
pub fn random_mask_loss<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    model: &BoundModel,
    emails: &[&PreparedEmail],
    mc: &ModelConfig,
    oc: &ObjectiveConfig,
    rng: &mut R,
    mask: Option<Tensor>,
) -> Result<Var> {
    check_batch(emails)?;
    oc.validate()?;
    let x = encode_sentences(g, &model.encoder, emails, mc, true, rng)?;
    let shape = [emails.len(), mc.max_sentences];
    let r = match mask {
        Some(m) => m.reshape(&shape)?,
        None => crate::model::sample_random_mask(&shape, oc.tau, rng)?,
    };
    let r = g.constant(r);
    let masked = apply_mask(g, &x, r)?;
    let probs = classify(g, &model.classifier, masked, &x, mc, true, rng)?;
    let labels: Vec<Label> = emails.iter().map(|e| e.label).collect();
    cross_entropy_batch(g, probs, &labels)
}
