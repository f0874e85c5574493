#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use phishloc::autodiff::{Graph, Tensor};
use phishloc::model::{BoundModel, GumbelNoise, ModelConfig, ModelParams};
use phishloc::objectives::{joint_loss_with, random_mask_loss, JointOptions, ObjectiveConfig};
use phishloc::synth::{generate_corpus, SynthConfig};
use phishloc::text::{encode_email, PreparedEmail, Vocabulary};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        max_sentences: 5,
        tokens_per_sentence: 12,
        embed_dim: 8,
        kernel_size: 3,
        selector_hidden: vec![8, 8],
        classifier_hidden: vec![8, 8],
        retain_p: 0.8,
        selector_input: Default::default(),
        classifier_input: Default::default(),
    }
}

/// Four encoded synthetic emails and their vocabulary size.
pub fn tiny_batch(seed: u64, config: &ModelConfig) -> (Vec<PreparedEmail>, usize) {
    let corpus = generate_corpus(&SynthConfig {
        n_emails: 4,
        min_sentences: 2,
        max_sentences: config.max_sentences,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let raws: Vec<_> = corpus.into_iter().map(|e| e.email).collect();
    let vocab = Vocabulary::build(&raws, 64).unwrap();
    let emails = raws
        .iter()
        .map(|e| encode_email(e, &vocab, config.max_sentences, config.tokens_per_sentence).unwrap())
        .collect();
    (emails, vocab.len())
}

#[derive(Clone, Copy, Debug)]
pub enum Loss {
    Joint,
    RandomMask,
}

struct Fixed {
    noise: GumbelNoise,
    mask: Tensor,
    dropout_seed: u64,
}

fn eval(
    params: &ModelParams,
    config: &ModelConfig,
    emails: &[&PreparedEmail],
    fixed: &Fixed,
    which: Loss,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let oc = ObjectiveConfig::default();
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, params, matches!(which, Loss::Joint), true);
    let mut rng = ChaCha8Rng::seed_from_u64(fixed.dropout_seed);
    let loss = match which {
        Loss::Joint => {
            let opts = JointOptions {
                noise: Some(fixed.noise.clone()),
                include_prior_constant: false,
            };
            joint_loss_with(&mut g, &bound, emails, config, &oc, &mut rng, &opts).unwrap().total
        }
        Loss::RandomMask => {
            random_mask_loss(&mut g, &bound, emails, config, &oc, &mut rng, Some(fixed.mask.clone())).unwrap()
        }
    };
    let value = g.value(loss)[0];
    if !want_grad {
        return (value, None);
    }
    let grads = g.backward(loss).unwrap();
    let mut flat = Vec::new();
    for (v, (_, _, t)) in bound.vars(params).into_iter().zip(params.named()) {
        match v.and_then(|v| grads.get(v)) {
            Some(gr) => flat.extend_from_slice(gr),
            None => flat.extend(std::iter::repeat(0.0).take(t.len())),
        }
    }
    (value, Some(flat))
}

/// Relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` of the
/// full parameter gradient against central differences with step `h`.
pub fn gradient_check(seed: u64, which: Loss, h: f64) -> f64 {
    gradient_check_with(&tiny_config(), seed, which, h)
}

pub fn gradient_check_with(config: &ModelConfig, seed: u64, which: Loss, h: f64) -> f64 {
    let config = config.clone();
    let (emails, vocab) = tiny_batch(seed, &config);
    let refs: Vec<&PreparedEmail> = emails.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let mut params = ModelParams::init(&config, vocab, &mut rng).unwrap();
    // Zero biases put hidden units with all-zero input exactly on the relu kink.
    for (name, t) in params.named().iter().map(|(n, _, _)| n.clone()).collect::<Vec<_>>().iter().zip(params.tensors_mut()) {
        if name.ends_with("bias") {
            t.1.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    let shape = [refs.len(), config.max_sentences];
    let noise = GumbelNoise::sample(&shape, &mut rng);
    let mask = phishloc::model::sample_random_mask(&shape, 0.5, &mut rng).unwrap();
    let fixed = Fixed {
        noise,
        mask,
        dropout_seed: seed,
    };
    let (_, analytic) = eval(&params, &config, &refs, &fixed, which, true);
    let analytic = analytic.unwrap();

    let mut numeric = Vec::with_capacity(analytic.len());
    let n_tensors = params.named().len();
    for ti in 0..n_tensors {
        let len = params.named()[ti].2.len();
        for j in 0..len {
            let orig = params.tensors_mut()[ti].1.data()[j];
            params.tensors_mut()[ti].1.data_mut()[j] = orig + h;
            let (up, _) = eval(&params, &config, &refs, &fixed, which, false);
            params.tensors_mut()[ti].1.data_mut()[j] = orig - h;
            let (down, _) = eval(&params, &config, &refs, &fixed, which, false);
            params.tensors_mut()[ti].1.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-300)
}
