use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crfgen::compute::Array;
use crfgen::corpus::{build_vocab, encode_corpus, generate_synthetic, SynthSpec};
use crfgen::crf::{
    backward_pass, conditional_factor, sample_with, ChainPotentials, Interaction, PairwiseOperator, StepOperator,
};
use crfgen::eval::{fit_kn, gen_stats, perplexity};
use crfgen::selftest::Instance;
use crfgen::training::{train, Model, TrainConfig};

#[test]
fn training_text_is_more_likely_than_its_shuffled_words() {
    let corpus = generate_synthetic(&SynthSpec::banded(5, 50, 0.2, 15, 11), 3000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shuffled: Vec<Vec<String>> = corpus
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.shuffle(&mut rng);
            s
        })
        .collect();
    for n in [2, 3] {
        let lm = fit_kn(&corpus, n, 0.75).unwrap();
        let own = perplexity(&lm, &corpus).unwrap();
        let mixed = perplexity(&lm, &shuffled).unwrap();
        assert!(own < mixed, "n={n}: {own} vs {mixed}");
    }
}

#[test]
fn held_out_synthetic_sentences_are_mostly_unique() {
    let spec = SynthSpec::banded(6, 600, 0.1, 15, 5);
    let heldout = generate_synthetic(&spec, 2000).unwrap();
    let stats = gen_stats(&heldout).unwrap();
    assert!(stats.rho_uni > 95.0, "{}", stats.rho_uni);
}

/// `T[a, b] = 1` off the diagonal and `1e-6` on it: self-transitions are
/// all but forbidden.
fn no_repeat_chain(support: usize, t_len: usize, seed: u64) -> ChainPotentials {
    let v = support + 1;
    let mut eye = vec![0.0; v * v];
    for i in 0..v {
        eye[i * v + i] = 1.0;
    }
    let eye = Arc::new(Array::matrix(v, v, eye).unwrap());
    let mut m = vec![1.0; v * v];
    for i in 0..v {
        m[i * v + i] = 1e-6;
    }
    let interaction = Interaction::Full(Array::matrix(v, v, m).unwrap());
    let op = PairwiseOperator::new(eye.clone(), eye, interaction).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unary = (0..t_len)
        .map(|_| Array::randn(&[v], 1.5, &mut rng).data().to_vec())
        .collect();
    ChainPotentials::new(unary, vec![StepOperator::Factored(op); t_len]).unwrap()
}

#[test]
fn suppressed_self_transitions_give_almost_no_repeats() {
    let pot = no_repeat_chain(12, 8, 3);
    let entry = match pot.step(2) {
        StepOperator::Factored(op) => op.entry(4, 4),
        StepOperator::Ones(_) => unreachable!(),
    };
    assert!((entry - 1e-6).abs() < 1e-18);
    let bp = backward_pass(&pot).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let samples: Vec<Vec<String>> = (0..100_000)
        .map(|_| {
            sample_with(&pot, &bp, &mut rng)
                .unwrap()
                .iter()
                .map(|w| w.to_string())
                .collect()
        })
        .collect();
    let rep = gen_stats(&samples).unwrap().rho_rep;
    assert!(rep < 0.1, "{rep}");
}

#[test]
fn future_states_change_the_first_conditional() {
    let a = Instance::random(8, 4, 3, 2, false, 21);
    let mut b = a.clone();
    for x in b.states.last_mut().unwrap() {
        *x += 1.0;
    }
    let first = |inst: &Instance| {
        let pot = inst.potentials();
        conditional_factor(1, crfgen::corpus::BOS, &backward_pass(&pot).unwrap(), &pot).unwrap()
    };
    let gap = first(&a)
        .iter()
        .zip(&first(&b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(gap > 1e-6, "{gap}");
}

#[test]
fn dropping_the_kl_term_does_not_hurt_reconstruction() {
    let sents = generate_synthetic(&SynthSpec::banded(3, 12, 0.3, 10, 2), 400).unwrap();
    let vocab = build_vocab(&sents, 100).unwrap();
    let corpus = encode_corpus(&vocab, &sents, 10);
    let recon = |kl_weight: f64| {
        let config = TrainConfig {
            state_dim: 3,
            embed_dim: 6,
            hidden: 12,
            enc_dim: 6,
            enc_emb_dim: 4,
            epochs: 4,
            batch_size: 16,
            learning_rate: 0.01,
            kl_warmup: 0,
            kl_weight,
            seed: 8,
            ..TrainConfig::default()
        };
        let mut model = Model::new(config, vocab.len()).unwrap();
        let log = train(&mut model, &corpus, |_, _| Ok(())).unwrap();
        log.rows.last().unwrap().recon
    };
    let (free, regularized) = (recon(0.0), recon(1.0));
    assert!(free >= regularized, "{free} vs {regularized}");
}
