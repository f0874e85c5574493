mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use phishloc::autodiff::{Graph, Tensor};
use phishloc::model::{BoundModel, ModelConfig, ModelParams, SentenceModel};
use phishloc::objectives::random_mask_loss;
use phishloc::synth::{generate_corpus, SynthConfig};
use phishloc::text::{encode_email, Label, PreparedEmail, RawEmail, Vocabulary};
use phishloc::trainer::{train, validate_checkpoint, TrainConfig, Trainer};
use phishloc::Error;

use common::tiny_config;

fn fixture(n: usize, seed: u64, model: &ModelConfig) -> (Vec<PreparedEmail>, usize) {
    let corpus = generate_corpus(&SynthConfig {
        n_emails: n,
        min_sentences: 2,
        max_sentences: model.max_sentences,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let raws: Vec<RawEmail> = corpus.into_iter().map(|e| e.email).collect();
    let vocab = Vocabulary::build(&raws, 500).unwrap();
    let emails = raws
        .iter()
        .map(|e| encode_email(e, &vocab, model.max_sentences, model.tokens_per_sentence).unwrap())
        .collect();
    (emails, vocab.len())
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        batch_size: 16,
        epochs: 2,
        model: tiny_config(),
        ..TrainConfig::default()
    }
}

fn snapshot(params: &ModelParams) -> Vec<(String, Vec<f64>)> {
    params.named().into_iter().map(|(n, _, t)| (n, t.data().to_vec())).collect()
}

fn changed(before: &[(String, Vec<f64>)], after: &[(String, Vec<f64>)], prefix: &str) -> bool {
    before
        .iter()
        .zip(after)
        .filter(|((n, _), _)| n.starts_with(prefix))
        .any(|((_, a), (_, b))| a != b)
}

fn group_names(params: &ModelParams) -> Vec<String> {
    params.named().into_iter().map(|(n, _, _)| n).collect()
}

#[test]
fn parameter_names_identify_networks() {
    let p = ModelParams::init(&tiny_config(), 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let names = group_names(&p);
    for prefix in ["encoder.embedding", "encoder.conv", "selector", "classifier"] {
        assert!(names.iter().any(|n| n.starts_with(prefix)), "{names:?}");
    }
}

#[test]
fn disjoint_steps_only_move_the_classifier() {
    let c = config(1);
    let (emails, vocab) = fixture(32, 1, &c.model);
    let refs: Vec<&PreparedEmail> = emails.iter().collect();
    let mut trainer = Trainer::new(c, vocab).unwrap();
    let start = snapshot(&trainer.params);
    for step in 0..20 {
        let before = snapshot(&trainer.params);
        let batch = &refs[(step % 2) * 16..(step % 2 + 1) * 16];
        trainer.train_step_disjoint(batch).unwrap();
        let after = snapshot(&trainer.params);
        for prefix in ["encoder.embedding", "encoder.conv", "selector"] {
            assert!(!changed(&before, &after, prefix), "{prefix} moved at step {step}");
        }
    }
    assert!(changed(&start, &snapshot(&trainer.params), "classifier"));
}

#[test]
fn joint_step_moves_every_network() {
    let c = config(2);
    let (emails, vocab) = fixture(16, 2, &c.model);
    let refs: Vec<&PreparedEmail> = emails.iter().collect();
    let mut trainer = Trainer::new(c, vocab).unwrap();
    let before = snapshot(&trainer.params);
    let stats = trainer.train_step_joint(&refs).unwrap();
    let after = snapshot(&trainer.params);
    for prefix in ["encoder.embedding", "encoder.conv", "selector", "classifier"] {
        assert!(changed(&before, &after, prefix), "{prefix} did not move");
    }
    assert!(stats.grad_norm_post <= trainer.config.clip_threshold + 1e-9);
}

fn fixed_random_mask_loss(params: &ModelParams, model: &ModelConfig, batch: &[&PreparedEmail]) -> f64 {
    let c = TrainConfig::default();
    let mask = phishloc::model::sample_random_mask(
        &[batch.len(), model.max_sentences],
        c.tau,
        &mut ChaCha8Rng::seed_from_u64(99),
    )
    .unwrap();
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, params, false, false);
    let mut no_dropout = model.clone();
    no_dropout.retain_p = 1.0;
    let loss = random_mask_loss(
        &mut g,
        &bound,
        batch,
        &no_dropout,
        &c.objective(),
        &mut ChaCha8Rng::seed_from_u64(0),
        Some(mask),
    )
    .unwrap();
    g.value(loss)[0]
}

#[test]
fn repeated_disjoint_steps_reduce_the_loss() {
    let c = config(3);
    let (emails, vocab) = fixture(12, 3, &c.model);
    let refs: Vec<&PreparedEmail> = emails.iter().collect();
    let mut trainer = Trainer::new(c.clone(), vocab).unwrap();
    let before = fixed_random_mask_loss(&trainer.params, &c.model, &refs);
    for _ in 0..50 {
        trainer.train_step_disjoint(&refs).unwrap();
    }
    let after = fixed_random_mask_loss(&trainer.params, &c.model, &refs);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn zero_gradient_batch_leaves_parameters_unchanged() {
    let c = config(4);
    let (emails, vocab) = fixture(20, 4, &c.model);
    let benign = emails.iter().find(|e| e.label == Label::Benign).unwrap();
    let phishing = emails.iter().find(|e| e.label == Label::Phishing).unwrap();
    let refs = [benign, phishing];
    let mut params = ModelParams::init(&c.model, vocab, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    for layer in &mut params.classifier {
        layer.weight = Tensor::zeros(layer.weight.shape());
    }
    let mut trainer = Trainer::with_params(c, params);
    let before = snapshot(&trainer.params);
    for _ in 0..3 {
        let s = trainer.train_step_disjoint(&refs).unwrap();
        assert_eq!(s.grad_norm_pre, 0.0);
    }
    assert_eq!(before, snapshot(&trainer.params));
}

#[test]
fn small_fixture_is_learned_exactly() {
    let mut c = config(5);
    c.model.embed_dim = 16;
    c.model.selector_hidden = vec![16];
    c.model.classifier_hidden = vec![16];
    let (emails, vocab) = fixture(10, 5, &c.model);
    let refs: Vec<&PreparedEmail> = emails.iter().collect();
    let mut trainer = Trainer::new(c, vocab).unwrap();
    for _ in 0..200 {
        trainer.train_step_disjoint(&refs).unwrap();
        trainer.train_step_joint(&refs).unwrap();
    }
    let record = validate_checkpoint(&trainer.model(), &refs).unwrap();
    assert_eq!(record.accuracy, 1.0);
}

fn mean_real_p(trainer: &Trainer, emails: &[&PreparedEmail]) -> f64 {
    let probs = trainer.model().selection_probs(emails).unwrap();
    let mut sum = 0.0;
    let mut n = 0;
    for (p, e) in probs.iter().zip(emails) {
        let k = e.tokens.real_sentence_count();
        sum += p.as_slice()[..k].iter().sum::<f64>();
        n += k;
    }
    sum / n as f64
}

#[test]
fn strong_penalty_lowers_selection_probabilities() {
    for seed in 0..3 {
        let run = |lambda: f64| {
            let mut c = config(seed);
            c.lambda = lambda;
            let (emails, vocab) = fixture(16, seed, &c.model);
            let refs: Vec<&PreparedEmail> = emails.iter().collect();
            let mut trainer = Trainer::new(c, vocab).unwrap();
            for _ in 0..200 {
                trainer.train_step_disjoint(&refs).unwrap();
                trainer.train_step_joint(&refs).unwrap();
            }
            mean_real_p(&trainer, &refs)
        };
        let (free, pressed) = (run(0.0), run(10.0));
        assert!(pressed < free, "seed {seed}: {pressed} vs {free}");
    }
}

#[test]
fn training_log_is_reproducible_and_consistent() {
    let mut c = config(6);
    c.clip_threshold = 0.05;
    let (emails, vocab) = fixture(60, 6, &c.model);
    let (tr, val) = emails.split_at(50);
    let a = train(&c, vocab, tr, val).unwrap();
    let b = train(&c, vocab, tr, val).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.best.params, b.best.params);

    for epoch in 1..=c.epochs {
        let steps = a.log.iter().filter(|r| r.epoch == epoch && r.step.is_some()).count();
        assert_eq!(steps, tr.len().div_ceil(c.batch_size));
    }
    for r in a.log.iter().filter(|r| r.step.is_some()) {
        assert!(r.grad_norm_post.unwrap() <= c.clip_threshold + 1e-9);
        assert!(r.random_mask_loss.is_some());
        let (ce, ib, total) = (r.ce.unwrap(), r.ib_penalty.unwrap(), r.total.unwrap());
        assert!((total - (ce + c.lambda * ib)).abs() <= 1e-12);
    }
    let scores: Vec<f64> = a.log.iter().filter_map(|r| r.val_accuracy).collect();
    assert_eq!(scores.len(), c.epochs);
    assert!(scores.iter().all(|&s| a.best_val_accuracy >= s - 1e-12));
    let first_best = scores.iter().position(|&s| s == a.best_val_accuracy).unwrap();
    assert_eq!(a.best_epoch, first_best + 1);

    let val_refs: Vec<&PreparedEmail> = val.iter().collect();
    let again = validate_checkpoint(&a.best, &val_refs).unwrap();
    assert_eq!(again.accuracy, a.best_val_accuracy);
    assert_eq!(again, validate_checkpoint(&a.best, &val_refs).unwrap());
}

#[test]
fn ablated_training_skips_the_disjoint_step() {
    let mut c = config(7);
    c.use_ddm = false;
    c.epochs = 1;
    let (emails, vocab) = fixture(30, 7, &c.model);
    let (tr, val) = emails.split_at(24);
    let out = train(&c, vocab, tr, val).unwrap();
    assert!(out.log.iter().all(|r| r.random_mask_loss.is_none()));
}

#[test]
fn divergence_aborts_with_a_diagnostic() {
    let mut c = config(8);
    c.learning_rate = 1e200;
    c.epochs = 3;
    let (emails, vocab) = fixture(40, 8, &c.model);
    let (tr, val) = emails.split_at(32);
    assert!(matches!(train(&c, vocab, tr, val), Err(Error::NonFinite { .. })));
}

#[test]
fn empty_inputs_are_rejected() {
    let c = config(9);
    let p = ModelParams::init(&c.model, 20, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let model = phishloc::model::Model { config: c.model.clone(), params: p };
    assert!(validate_checkpoint(&model, &[]).is_err());
    assert!(train(&c, 20, &[], &[]).is_err());
}
