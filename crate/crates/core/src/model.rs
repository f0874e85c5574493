//! Sentence encoder, selection network, classifier and the masking algebra.
//!
//! All graph-building functions work on a minibatch. Sentence matrices are
//! laid out as `[B·L × d]` (row `b·L + i` is sentence `i` of email `b`). The
//! selector scores each row; the classifier reads the sum of the masked rows,
//! or optionally the flattened `[B × L·d]` view. Pad sentences are exact zero
//! rows, which the flattened layouts exploit by skipping them as structural
//! zeros.

use std::ops::Range;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sample_gumbel, Activation, BlockSparsity, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout, embedding_lookup, glorot_uniform, BoundDense, DenseLayer, EmbeddingTable};
use crate::text::{PreparedEmail, MAX_SENTENCES, TOKENS_PER_SENTENCE};

/// Probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Sentences per email (`L`).
    pub max_sentences: usize,
    /// Tokens per sentence (`T`).
    pub tokens_per_sentence: usize,
    /// Embedding width; the convolution keeps the same number of channels.
    pub embed_dim: usize,
    pub kernel_size: usize,
    pub selector_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub retain_p: f64,
    #[serde(default)]
    pub selector_input: SelectorInput,
    #[serde(default)]
    pub classifier_input: ClassifierInput,
}

/// How the classifier reads the masked sentence matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    /// The sum of the masked sentence vectors, one `d`-vector per email.
    #[default]
    SumPool,
    /// The whole masked `L·d` matrix.
    Flatten,
}

impl std::str::FromStr for ClassifierInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum_pool" => Ok(ClassifierInput::SumPool),
            "flatten" => Ok(ClassifierInput::Flatten),
            other => Err(Error::Config(format!("unknown classifier input `{other}`"))),
        }
    }
}

/// How the selection network reads the sentence matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorInput {
    /// One network scores each sentence vector on its own; `p_i = ω(x_i)`.
    #[default]
    PerSentence,
    /// The whole `L·d` matrix feeds one network with `L` outputs.
    Flatten,
}

impl std::str::FromStr for SelectorInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_sentence" => Ok(SelectorInput::PerSentence),
            "flatten" => Ok(SelectorInput::Flatten),
            other => Err(Error::Config(format!("unknown selector input `{other}`"))),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            max_sentences: MAX_SENTENCES,
            tokens_per_sentence: TOKENS_PER_SENTENCE,
            embed_dim: 150,
            kernel_size: 3,
            selector_hidden: vec![300, 300, 100],
            classifier_hidden: vec![300, 100],
            retain_p: crate::nn::RETAIN_P,
            selector_input: SelectorInput::PerSentence,
            classifier_input: ClassifierInput::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_sentences", self.max_sentences),
            ("tokens_per_sentence", self.tokens_per_sentence),
            ("embed_dim", self.embed_dim),
            ("kernel_size", self.kernel_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.tokens_per_sentence < self.kernel_size {
            return Err(Error::SequenceTooShort {
                len: self.tokens_per_sentence,
                kernel: self.kernel_size,
            });
        }
        if self.selector_hidden.iter().chain(&self.classifier_hidden).any(|&h| h == 0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        if !(self.retain_p > 0.0 && self.retain_p <= 1.0) {
            return Err(Error::Config(format!("retain_p must be in (0, 1], got {}", self.retain_p)));
        }
        Ok(())
    }

    /// Width of the flattened sentence matrix.
    pub fn flat_dim(&self) -> usize {
        self.max_sentences * self.embed_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Selector,
    Classifier,
}

/// Every learnable array of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: EmbeddingTable,
    /// `[k × d × d]`
    pub conv_kernel: Tensor,
    pub conv_bias: Tensor,
    /// Selection network: hidden relu layers, then `L` sigmoid units.
    pub selector: Vec<DenseLayer>,
    /// Classifier: hidden relu layers, then a 2-way softmax.
    pub classifier: Vec<DenseLayer>,
}

fn mlp<R: Rng + ?Sized>(
    input: usize,
    hidden: &[usize],
    output: usize,
    out_act: Activation,
    zero_output: bool,
    rng: &mut R,
) -> Vec<DenseLayer> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut width = input;
    for &h in hidden {
        layers.push(DenseLayer::init(width, h, Activation::Relu, rng));
        width = h;
    }
    let mut last = DenseLayer::init(width, output, out_act, rng);
    if zero_output {
        last.weight = Tensor::zeros(last.weight.shape());
    }
    layers.push(last);
    layers
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        Self::init_impl(config, vocab_size, false, rng)
    }

    /// Same as [`ModelParams::init`] but with zero output-layer weights, so the
    /// selector emits 0.5 everywhere and the classifier `[0.5, 0.5]`.
    pub fn init_zero_output<R: Rng + ?Sized>(config: &ModelConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        Self::init_impl(config, vocab_size, true, rng)
    }

    fn init_impl<R: Rng + ?Sized>(config: &ModelConfig, vocab_size: usize, zero_out: bool, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if vocab_size < 2 {
            return Err(Error::Config("vocabulary must hold at least <pad> and <unk>".into()));
        }
        let d = config.embed_dim;
        let k = config.kernel_size;
        let embedding = EmbeddingTable::init(vocab_size, d, rng);
        let conv_kernel = glorot_uniform(&[k, d, d], k * d, k * d, rng);
        let (sel_in, sel_out) = match config.selector_input {
            SelectorInput::PerSentence => (d, 1),
            SelectorInput::Flatten => (config.flat_dim(), config.max_sentences),
        };
        let selector = mlp(sel_in, &config.selector_hidden, sel_out, Activation::Sigmoid, zero_out, rng);
        let cls_in = match config.classifier_input {
            ClassifierInput::SumPool => d,
            ClassifierInput::Flatten => config.flat_dim(),
        };
        let classifier = mlp(
            cls_in,
            &config.classifier_hidden,
            2,
            Activation::Softmax,
            zero_out,
            rng,
        );
        Ok(ModelParams {
            embedding,
            conv_kernel,
            conv_bias: Tensor::zeros(&[d]),
            selector,
            classifier,
        })
    }

    /// `(name, group, tensor)` in canonical order.
    pub fn named(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = vec![
            ("encoder.embedding".to_string(), ParamGroup::Encoder, &self.embedding.table),
            ("encoder.conv.kernel".to_string(), ParamGroup::Encoder, &self.conv_kernel),
            ("encoder.conv.bias".to_string(), ParamGroup::Encoder, &self.conv_bias),
        ];
        for (prefix, group, layers) in [
            ("selector", ParamGroup::Selector, &self.selector),
            ("classifier", ParamGroup::Classifier, &self.classifier),
        ] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), group, &l.weight));
                out.push((format!("{prefix}.{i}.bias"), group, &l.bias));
            }
        }
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        let mut out = vec![
            (ParamGroup::Encoder, &mut self.embedding.table),
            (ParamGroup::Encoder, &mut self.conv_kernel),
            (ParamGroup::Encoder, &mut self.conv_bias),
        ];
        for (group, layers) in [
            (ParamGroup::Selector, &mut self.selector),
            (ParamGroup::Classifier, &mut self.classifier),
        ] {
            for l in layers.iter_mut() {
                out.push((group, &mut l.weight));
                out.push((group, &mut l.bias));
            }
        }
        out
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.vocab_size()
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, _, t)| t.len()).sum()
    }
}

/// Encoder parameters on a graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundEncoder {
    pub embedding: Var,
    pub kernel: Var,
    pub bias: Var,
}

/// The model's parameters bound onto one graph. Networks that are not
/// bound take no part in the pass and receive no gradient.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub selector: Option<Vec<BoundDense>>,
    pub classifier: Vec<BoundDense>,
}

fn bind_param<'a>(g: &mut Graph<'a>, t: &'a Tensor, trainable: bool) -> Var {
    if trainable {
        g.param(t)
    } else {
        g.param_frozen(t)
    }
}

fn bind_layers<'a>(g: &mut Graph<'a>, layers: &'a [DenseLayer], trainable: bool) -> Vec<BoundDense> {
    layers
        .iter()
        .map(|l| BoundDense {
            weight: bind_param(g, &l.weight, trainable),
            bias: bind_param(g, &l.bias, trainable),
            activation: l.activation,
        })
        .collect()
}

/// Which networks to bind and which of them receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BindSpec {
    pub encoder: bool,
    /// `None` leaves the selector unbound.
    pub selector: Option<bool>,
    pub classifier: bool,
}

impl BoundModel {
    pub fn bind<'a>(g: &mut Graph<'a>, params: &'a ModelParams, with_selector: bool, trainable: bool) -> Self {
        Self::bind_with(
            g,
            params,
            BindSpec {
                encoder: trainable,
                selector: with_selector.then_some(trainable),
                classifier: trainable,
            },
        )
    }

    pub fn bind_with<'a>(g: &mut Graph<'a>, params: &'a ModelParams, spec: BindSpec) -> Self {
        let encoder = BoundEncoder {
            embedding: bind_param(g, &params.embedding.table, spec.encoder),
            kernel: bind_param(g, &params.conv_kernel, spec.encoder),
            bias: bind_param(g, &params.conv_bias, spec.encoder),
        };
        let selector = spec.selector.map(|t| bind_layers(g, &params.selector, t));
        let classifier = bind_layers(g, &params.classifier, spec.classifier);
        BoundModel {
            encoder,
            selector,
            classifier,
        }
    }

    /// Vars in [`ModelParams::named`] order; `None` for unbound networks.
    pub fn vars(&self, params: &ModelParams) -> Vec<Option<Var>> {
        let mut out = vec![
            Some(self.encoder.embedding),
            Some(self.encoder.kernel),
            Some(self.encoder.bias),
        ];
        match &self.selector {
            Some(layers) => out.extend(layers.iter().flat_map(|l| [Some(l.weight), Some(l.bias)])),
            None => out.extend(std::iter::repeat(None).take(2 * params.selector.len())),
        }
        out.extend(self.classifier.iter().flat_map(|l| [Some(l.weight), Some(l.bias)]));
        out
    }
}

/// Encoded sentence matrices of a minibatch.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// `[B·L × d]`, pad rows exactly zero.
    pub x: Var,
    pub batch: usize,
    pub max_sentences: usize,
    pub dim: usize,
    pub real_counts: Vec<usize>,
    /// Per email, the sentence blocks of the flattened matrix that may be nonzero.
    pub sparsity: Rc<BlockSparsity>,
}

impl EncodedBatch {
    pub fn pad_mask(&self, b: usize) -> Vec<bool> {
        (0..self.max_sentences).map(|i| i < self.real_counts[b]).collect()
    }
}

/// Per sentence: embedding → dropout → valid convolution → relu → max pool;
/// pad sentences become zero rows.
///
/// Windows lying entirely in a sentence's trailing padding all produce the
/// bias vector, so only the first such window is evaluated; the pooled
/// values equal those of the full `T - k + 1` windows.
pub fn encode_sentences<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    enc: &BoundEncoder,
    emails: &[&PreparedEmail],
    config: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<EncodedBatch> {
    if emails.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let l = config.max_sentences;
    let t = config.tokens_per_sentence;
    let k = config.kernel_size;
    let d = config.embed_dim;
    let mut ids = Vec::new();
    let mut starts = Vec::new();
    let mut segments: Vec<Range<usize>> = Vec::new();
    let mut targets = Vec::new();
    let mut real_counts = Vec::with_capacity(emails.len());
    for (b, e) in emails.iter().enumerate() {
        let tok = &e.tokens;
        if tok.max_sentences() != l || tok.tokens_per_sentence() != t {
            return Err(Error::shape(
                "encode_sentences",
                &[tok.max_sentences(), tok.tokens_per_sentence()],
                &[l, t],
            ));
        }
        let real = tok.real_sentence_count();
        for s in 0..real {
            let n = tok.sentence_len(s);
            let seg_len = (n + k).min(t);
            let offset = ids.len();
            ids.extend_from_slice(&tok.row(s)[..seg_len]);
            let first = starts.len();
            starts.extend(offset..=offset + seg_len - k);
            segments.push(first..starts.len());
            targets.push(b * l + s);
        }
        real_counts.push(real);
    }
    if targets.is_empty() {
        return Err(Error::EmptyInput("batch without sentences"));
    }
    let emb = embedding_lookup(g, enc.embedding, &ids)?;
    let emb = dropout(g, emb, config.retain_p, training, rng)?;
    let conv = g.conv1d_windows(emb, enc.kernel, enc.bias, starts)?;
    let act = g.relu(conv);
    let pooled = g.segment_max_pool(act, &segments)?;
    let x = g.scatter_rows(pooled, &targets, emails.len() * l)?;
    let sparsity = Rc::new(BlockSparsity {
        block_len: d,
        active: real_counts.iter().map(|&c| (0..c).collect()).collect(),
    });
    Ok(EncodedBatch {
        x,
        batch: emails.len(),
        max_sentences: l,
        dim: d,
        real_counts,
        sparsity,
    })
}

/// Feed-forward pass over the flattened `[B × L·d]` view of `x`.
fn feed_forward<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    layers: &[BoundDense],
    x: Var,
    batch: &EncodedBatch,
    retain_p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let mut h = g.reshape(x, &[batch.batch, batch.max_sentences * batch.dim])?;
    for (i, layer) in layers.iter().enumerate() {
        h = if i == 0 {
            layer.forward_sparse(g, h, batch.sparsity.clone())?
        } else {
            layer.forward(g, h)?
        };
        if i + 1 < layers.len() {
            h = dropout(g, h, retain_p, training, rng)?;
        }
    }
    Ok(h)
}

/// Selector probabilities `[B × L]`. In per-sentence mode pad slots get 0.
pub fn selection_probs<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    selector: &[BoundDense],
    x: &EncodedBatch,
    config: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    match config.selector_input {
        SelectorInput::Flatten => feed_forward(g, selector, x.x, x, config.retain_p, training, rng),
        SelectorInput::PerSentence => {
            let rows: Vec<usize> = x
                .real_counts
                .iter()
                .enumerate()
                .flat_map(|(b, &n)| (0..n).map(move |i| b * x.max_sentences + i))
                .collect();
            let mut h = g.gather_rows(x.x, &rows, None)?;
            for (i, layer) in selector.iter().enumerate() {
                h = layer.forward(g, h)?;
                if i + 1 < selector.len() {
                    h = dropout(g, h, config.retain_p, training, rng)?;
                }
            }
            let p = g.scatter_rows(h, &rows, x.batch * x.max_sentences)?;
            g.reshape(p, &[x.batch, x.max_sentences])
        }
    }
}

/// Class probabilities `[B × 2]` from a masked sentence matrix.
pub fn classify<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    classifier: &[BoundDense],
    masked: Var,
    batch: &EncodedBatch,
    config: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    match config.classifier_input {
        ClassifierInput::Flatten => feed_forward(g, classifier, masked, batch, config.retain_p, training, rng),
        ClassifierInput::SumPool => {
            let mut h = g.sum_row_groups(masked, batch.max_sentences)?;
            for (i, layer) in classifier.iter().enumerate() {
                h = layer.forward(g, h)?;
                if i + 1 < classifier.len() {
                    h = dropout(g, h, config.retain_p, training, rng)?;
                }
            }
            Ok(h)
        }
    }
}

/// `X ⊙ z`: sentence row `i` scaled by `z_i`. `z` is `[B × L]`.
pub fn apply_mask(g: &mut Graph<'_>, batch: &EncodedBatch, z: Var) -> Result<Var> {
    let rows = batch.batch * batch.max_sentences;
    if g.value(z).len() != rows {
        return Err(Error::shape("apply_mask", &[rows], g.shape(z)));
    }
    let z = g.reshape(z, &[rows])?;
    g.scale_rows(batch.x, z)
}

/// Gumbel noise for a relaxed Bernoulli draw: `a` perturbs the "on" logit,
/// `b` the "off" logit.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelNoise {
    pub a: Tensor,
    pub b: Tensor,
}

impl GumbelNoise {
    pub fn sample<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let a = sample_gumbel(shape, rng);
        let b = sample_gumbel(shape, rng);
        GumbelNoise { a, b }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Relaxed Bernoulli mask from probabilities `p` with explicit noise:
///
/// `z = exp((ln p + a)/τ) / (exp((ln p + a)/τ) + exp((ln(1-p) + b)/τ))`,
/// evaluated as `sigmoid(((ln p + a) - (ln(1-p) + b)) / τ)`.
pub fn sample_selection_mask_with_noise(g: &mut Graph<'_>, p: Var, tau: f64, noise: &GumbelNoise) -> Result<Var> {
    check_tau(tau)?;
    let pc = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let log_on = g.log(pc);
    let off = g.affine(pc, -1.0, 1.0);
    let log_off = g.log(off);
    let a = g.constant(noise.a.clone().reshape(g.shape(p))?);
    let b = g.constant(noise.b.clone().reshape(g.shape(p))?);
    let on = g.add(log_on, a)?;
    let off = g.add(log_off, b)?;
    let diff = g.sub(on, off)?;
    let scaled = g.affine(diff, 1.0 / tau, 0.0);
    Ok(g.sigmoid(scaled))
}

/// Relaxed Bernoulli mask from `p` with fresh Gumbel noise.
pub fn sample_selection_mask<R: Rng + ?Sized>(g: &mut Graph<'_>, p: Var, tau: f64, rng: &mut R) -> Result<Var> {
    check_tau(tau)?;
    let noise = GumbelNoise::sample(g.shape(p), rng);
    sample_selection_mask_with_noise(g, p, tau, &noise)
}

/// Relaxed Bernoulli(0.5) mask; independent of every parameter.
pub fn sample_random_mask<R: Rng + ?Sized>(shape: &[usize], tau: f64, rng: &mut R) -> Result<Tensor> {
    check_tau(tau)?;
    let noise = GumbelNoise::sample(shape, rng);
    Ok(random_mask_from_noise(&noise, tau))
}

pub(crate) fn random_mask_from_noise(noise: &GumbelNoise, tau: f64) -> Tensor {
    let data = noise
        .a
        .data()
        .iter()
        .zip(noise.b.data())
        .map(|(a, b)| crate::autodiff::sigmoid_scalar((a - b) / tau))
        .collect();
    Tensor::new(noise.a.shape().to_vec(), data).expect("same shape as noise")
}

/// Selector output for one email.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionProbabilities(Vec<f64>);

impl SelectionProbabilities {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
            return Err(Error::Config("selection probabilities must lie in [0, 1]".into()));
        }
        Ok(SelectionProbabilities(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    Relaxed,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub z: Vec<f64>,
    pub mode: MaskMode,
}

impl SelectionMask {
    /// Indicator mask over `len` positions with ones at `selected`.
    pub fn hard(len: usize, selected: &[usize]) -> Result<Self> {
        let mut z = vec![0.0; len];
        for &i in selected {
            *z.get_mut(i).ok_or_else(|| Error::shape("hard mask", &[len], &[i]))? = 1.0;
        }
        Ok(SelectionMask { z, mode: MaskMode::Hard })
    }
}

/// Real sentences ordered by selector probability, highest first, ties to
/// the lower index; the first `k` are returned. `k` larger than the number of
/// real sentences is clamped with a warning.
pub fn rank_sentences(p: &[f64], pad_mask: &[bool], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len().min(pad_mask.len())).filter(|&i| pad_mask[i]).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    if k > idx.len() {
        log::warn!("requested top-{k} sentences but only {} are real", idx.len());
    }
    idx.truncate(k);
    idx
}

/// Frozen model for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Inference-time interface used by the metrics: per-email selector scores
/// and classification from a hard sentence selection.
pub trait SentenceModel {
    fn selection_probs(&self, emails: &[&PreparedEmail]) -> Result<Vec<SelectionProbabilities>>;

    /// Class probabilities `[benign, phishing]` when email `i` keeps only
    /// the sentences `selected[i]`.
    fn classify_selected(&self, emails: &[&PreparedEmail], selected: &[Vec<usize>]) -> Result<Vec<[f64; 2]>>;
}

const INFERENCE_CHUNK: usize = 128;

impl Model {
    fn chunked<T>(
        &self,
        emails: &[&PreparedEmail],
        mut f: impl FnMut(&[&PreparedEmail], usize) -> Result<Vec<T>>,
    ) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(emails.len());
        for (ci, chunk) in emails.chunks(INFERENCE_CHUNK).enumerate() {
            out.extend(f(chunk, ci * INFERENCE_CHUNK)?);
        }
        Ok(out)
    }
}

// Inference never samples, so this rng is never drawn from.
fn unused_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

impl SentenceModel for Model {
    fn selection_probs(&self, emails: &[&PreparedEmail]) -> Result<Vec<SelectionProbabilities>> {
        self.chunked(emails, |chunk, _| {
            let mut g = Graph::new();
            let bound = BoundModel::bind(&mut g, &self.params, true, false);
            let mut rng = unused_rng();
            let x = encode_sentences(&mut g, &bound.encoder, chunk, &self.config, false, &mut rng)?;
            let selector = bound.selector.as_deref().expect("bound with selector");
            let p = selection_probs(&mut g, selector, &x, &self.config, false, &mut rng)?;
            g.value(p)
                .chunks_exact(self.config.max_sentences)
                .map(|row| SelectionProbabilities::new(row.to_vec()))
                .collect()
        })
    }

    fn classify_selected(&self, emails: &[&PreparedEmail], selected: &[Vec<usize>]) -> Result<Vec<[f64; 2]>> {
        if selected.len() != emails.len() {
            return Err(Error::shape("classify_selected", &[emails.len()], &[selected.len()]));
        }
        let l = self.config.max_sentences;
        self.chunked(emails, |chunk, offset| {
            let mut g = Graph::new();
            let bound = BoundModel::bind(&mut g, &self.params, false, false);
            let mut rng = unused_rng();
            let x = encode_sentences(&mut g, &bound.encoder, chunk, &self.config, false, &mut rng)?;
            let mut z = Vec::with_capacity(chunk.len() * l);
            for sel in &selected[offset..offset + chunk.len()] {
                z.extend(SelectionMask::hard(l, sel)?.z);
            }
            let z = g.constant(Tensor::new(vec![chunk.len(), l], z)?);
            let masked = apply_mask(&mut g, &x, z)?;
            let probs = classify(&mut g, &bound.classifier, masked, &x, &self.config, false, &mut rng)?;
            Ok(g.value(probs).chunks_exact(2).map(|r| [r[0], r[1]]).collect())
        })
    }
}
