mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use phishloc::autodiff::{Graph, Tensor};
use phishloc::model::{classify, encode_sentences, BoundModel, ModelParams};
use phishloc::objectives::{
    cross_entropy_batch, ib_penalty, ib_penalty_batch, joint_loss, joint_loss_with, random_mask_loss, JointOptions,
    ObjectiveConfig,
};
use phishloc::text::{Label, PreparedEmail};
use phishloc::Error;

use common::{tiny_batch, tiny_config};

fn setup(seed: u64) -> (Vec<PreparedEmail>, ModelParams) {
    let config = tiny_config();
    let (emails, vocab) = tiny_batch(seed, &config);
    let params = ModelParams::init(&config, vocab, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (emails, params)
}

#[test]
fn total_is_ce_plus_weighted_penalty() {
    let config = tiny_config();
    for seed in 0..10 {
        let (emails, params) = setup(seed);
        let refs: Vec<&PreparedEmail> = emails.iter().collect();
        for lambda in [0.0, 1e-3, 1e-2, 0.1, 3.0] {
            let oc = ObjectiveConfig {
                lambda,
                ..ObjectiveConfig::default()
            };
            let mut g = Graph::new();
            let bound = BoundModel::bind(&mut g, &params, true, true);
            let pass = joint_loss(&mut g, &bound, &refs, &config, &oc, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = pass.breakdown;
            assert!((b.total - (b.ce + lambda * b.ib_penalty)).abs() <= 1e-12);
            assert!(b.ce >= 0.0 && b.ib_penalty >= 0.0);
            if lambda == 0.0 {
                assert_eq!(b.total, b.ce);
            }
        }
    }
}

#[test]
fn batch_penalty_is_mean_of_email_penalties() {
    let config = tiny_config();
    let (emails, params) = setup(4);
    let refs: Vec<&PreparedEmail> = emails.iter().collect();
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, &params, true, false);
    let x = encode_sentences(&mut g, &bound.encoder, &refs, &config, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let l = config.max_sentences;
    let p: Vec<f64> = (0..refs.len() * l).map(|i| (i % 7) as f64 / 7.0).collect();
    let pv = g.constant(Tensor::new(vec![refs.len(), l], p.clone()).unwrap());
    let pen = ib_penalty_batch(&mut g, pv, &x, 0.2).unwrap();
    let batch = g.value(pen)[0];

    let rows: Vec<Vec<f64>> = g.value(x.x).chunks_exact(config.embed_dim).map(<[f64]>::to_vec).collect();
    let mut expected = 0.0;
    for b in 0..refs.len() {
        expected += ib_penalty(&p[b * l..(b + 1) * l], &rows[b * l..(b + 1) * l], 0.2).unwrap();
    }
    expected /= refs.len() as f64;
    assert!((batch - expected).abs() <= 1e-9 * expected.max(1.0));
}

#[test]
fn prior_constant_does_not_change_gradients() {
    let config = tiny_config();
    let oc = ObjectiveConfig::default();
    for seed in 0..3 {
        let (emails, params) = setup(seed);
        let refs: Vec<&PreparedEmail> = emails.iter().collect();
        let grads = |with_constant: bool| {
            let mut g = Graph::new();
            let bound = BoundModel::bind(&mut g, &params, true, true);
            let opts = JointOptions {
                noise: None,
                include_prior_constant: with_constant,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pass = joint_loss_with(&mut g, &bound, &refs, &config, &oc, &mut rng, &opts).unwrap();
            let grads = g.backward(pass.total).unwrap();
            let out: Vec<Vec<f64>> = bound
                .vars(&params)
                .into_iter()
                .map(|v| grads.get(v.unwrap()).map(<[f64]>::to_vec).unwrap_or_default())
                .collect();
            (pass.breakdown, out)
        };
        let (plain, g0) = grads(false);
        let (shifted, g1) = grads(true);
        assert!(shifted.ib_penalty != plain.ib_penalty);
        for (a, b) in g0.iter().zip(&g1) {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
        }
    }
}

#[test]
fn random_mask_loss_leaves_selector_untouched() {
    let config = tiny_config();
    let oc = ObjectiveConfig::default();
    let (emails, params) = setup(2);
    let refs: Vec<&PreparedEmail> = emails.iter().collect();
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, &params, true, true);
    let loss = random_mask_loss(&mut g, &bound, &refs, &config, &oc, &mut ChaCha8Rng::seed_from_u64(1), None).unwrap();
    let v = g.value(loss)[0];
    assert!(v.is_finite() && v >= 0.0);
    let grads = g.backward(loss).unwrap();
    for layer in bound.selector.as_ref().unwrap() {
        for var in [layer.weight, layer.bias] {
            assert!(grads.get(var).is_none_or(|gr| gr.iter().all(|&x| x == 0.0)));
        }
    }
    let cls = grads.get(bound.classifier[0].weight).unwrap();
    assert!(cls.iter().any(|&x| x != 0.0));
}

#[test]
fn all_ones_mask_is_plain_cross_entropy() {
    let config = tiny_config();
    let oc = ObjectiveConfig::default();
    let (emails, params) = setup(5);
    let refs: Vec<&PreparedEmail> = emails.iter().collect();
    let ones = Tensor::full(&[refs.len(), config.max_sentences], 1.0);

    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, &params, false, true);
    let masked =
        random_mask_loss(&mut g, &bound, &refs, &config, &oc, &mut ChaCha8Rng::seed_from_u64(8), Some(ones)).unwrap();
    let masked = g.value(masked)[0];

    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, &params, false, true);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = encode_sentences(&mut g, &bound.encoder, &refs, &config, true, &mut rng).unwrap();
    let probs = classify(&mut g, &bound.classifier, x.x, &x, &config, true, &mut rng).unwrap();
    let labels: Vec<Label> = refs.iter().map(|e| e.label).collect();
    let plain = cross_entropy_batch(&mut g, probs, &labels).unwrap();
    assert_eq!(masked, g.value(plain)[0]);
}

#[test]
fn uniform_classifier_costs_ln_two() {
    let config = tiny_config();
    let (emails, vocab) = tiny_batch(1, &config);
    let refs: Vec<&PreparedEmail> = emails.iter().collect();
    let params = ModelParams::init_zero_output(&config, vocab, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let oc = ObjectiveConfig {
        lambda: 0.0,
        ..ObjectiveConfig::default()
    };
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, &params, true, true);
    let pass = joint_loss(&mut g, &bound, &refs, &config, &oc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!((pass.breakdown.ce - std::f64::consts::LN_2).abs() < 1e-12);
    let r = random_mask_loss(&mut g, &bound, &refs, &config, &oc, &mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
    assert!((g.value(r)[0] - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn empty_batches_and_bad_settings_are_rejected() {
    let config = tiny_config();
    let (emails, params) = setup(0);
    let refs: Vec<&PreparedEmail> = emails.iter().collect();
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, &params, true, true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let oc = ObjectiveConfig::default();
    assert!(matches!(
        joint_loss(&mut g, &bound, &[], &config, &oc, &mut rng),
        Err(Error::EmptyInput(_))
    ));
    assert!(matches!(
        random_mask_loss(&mut g, &bound, &[], &config, &oc, &mut rng, None),
        Err(Error::EmptyInput(_))
    ));
    let bad = ObjectiveConfig {
        sigma: 0.0,
        ..oc
    };
    assert!(joint_loss(&mut g, &bound, &refs, &config, &bad, &mut rng).is_err());
    let bad = ObjectiveConfig { tau: 0.0, ..oc };
    assert!(joint_loss(&mut g, &bound, &refs, &config, &bad, &mut rng).is_err());
}

proptest! {
    #[test]
    fn penalty_is_monotone_in_each_probability(
        p in proptest::collection::vec(0.0f64..1.0, 1..8),
        rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 8),
        i in 0usize..8,
        bump in 0.0f64..1.0,
        sigma in 0.05f64..1.0,
    ) {
        let rows = &rows[..p.len()];
        let i = i % p.len();
        let mut q = p.clone();
        q[i] = (q[i] + bump).min(1.0);
        let before = ib_penalty(&p, rows, sigma).unwrap();
        let after = ib_penalty(&q, rows, sigma).unwrap();
        prop_assert!(before >= 0.0);
        prop_assert!(after >= before);
    }
}
