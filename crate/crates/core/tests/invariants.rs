use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crfgen::compute::logsumexp;
use crfgen::corpus::{generate_synthetic, SynthSpec, BOS, EOS};
use crfgen::crf::{backward_pass, brute_force_log_z, conditional_factor, log_likelihood};
use crfgen::dynamics::{gaussian_kl, Gaussian};
use crfgen::eval::{fit_kn, gen_stats, perplexity};
use crfgen::selftest::{random_sequence, Instance};
use crfgen::training::{KlEstimator, Model, TrainConfig};

fn small_model(seed: u64, vocab: usize, unary_only: bool) -> Model {
    let config = TrainConfig {
        state_dim: 3,
        embed_dim: 4,
        hidden: 6,
        enc_dim: 4,
        enc_emb_dim: 3,
        unary_only,
        seed,
        ..TrainConfig::default()
    };
    Model::new(config, vocab).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_z_matches_enumeration(v in 2usize..=6, t in 1usize..=5, d in 2usize..=4, dp in 2usize..=4, seed in any::<u64>()) {
        let pot = Instance::random(v + 1, t, d, dp, false, seed).potentials();
        let dp_z = backward_pass(&pot).unwrap().log_z;
        prop_assert!((dp_z - brute_force_log_z(&pot).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn conditionals_are_distributions_off_bos(v in 2usize..=30, t in 1usize..=8, seed in any::<u64>()) {
        let pot = Instance::random(v + 1, t, 3, 2, false, seed).potentials();
        let bp = backward_pass(&pot).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = random_sequence(v + 1, t, &mut rng);
        let mut prev = BOS;
        for (k, &w) in seq.iter().enumerate() {
            let f = conditional_factor(k + 1, prev, &bp, &pot).unwrap();
            prop_assert_eq!(f[BOS], 0.0);
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prev = w;
        }
    }

    #[test]
    fn unary_only_partition_factorizes(v in 2usize..=6, t in 1usize..=5, seed in any::<u64>()) {
        let pot = Instance::random(v + 1, t, 3, 2, true, seed).potentials();
        let factored: f64 = (1..=t).map(|k| logsumexp(&pot.unary(k)[1..]).unwrap()).sum();
        prop_assert!((backward_pass(&pot).unwrap().log_z - factored).abs() < 1e-10);
        prop_assert!((brute_force_log_z(&pot).unwrap() - factored).abs() < 1e-8);
    }

    #[test]
    fn unary_only_conditionals_ignore_the_previous_word(v in 2usize..=10, t in 2usize..=6, seed in any::<u64>()) {
        let pot = Instance::random(v + 1, t, 3, 2, true, seed).potentials();
        let bp = backward_pass(&pot).unwrap();
        for k in 2..=t {
            let base = conditional_factor(k, 1, &bp, &pot).unwrap();
            for prev in 2..=v {
                let other = conditional_factor(k, prev, &bp, &pot).unwrap();
                for (a, b) in base.iter().zip(&other) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn log_likelihood_is_a_log_probability(v in 2usize..=20, t in 1usize..=10, seed in any::<u64>()) {
        let pot = Instance::random(v + 1, t, 4, 3, false, seed).potentials();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ll = log_likelihood(&random_sequence(v + 1, t, &mut rng), &pot).unwrap();
        prop_assert!(ll.is_finite() && ll <= 0.0);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_equality(
        mq in prop::collection::vec(-3.0f64..3.0, 1..6),
        shift in prop::collection::vec(-2.0f64..2.0, 6),
        lq in prop::collection::vec(-4.0f64..4.0, 6),
        lp in prop::collection::vec(-4.0f64..4.0, 6),
    ) {
        let n = mq.len();
        let q = Gaussian { mean: mq.clone(), log_var: lq[..n].to_vec() };
        let p = Gaussian { mean: mq.iter().zip(&shift).map(|(a, b)| a + b).collect(), log_var: lp[..n].to_vec() };
        prop_assert!(gaussian_kl(&q, &p) >= 0.0);
        prop_assert!(gaussian_kl(&q, &q).abs() < 1e-12);
    }

    #[test]
    fn elbo_terms_have_the_right_signs(seed in any::<u64>(), t in 1usize..=6, unary_only in any::<bool>()) {
        let model = small_model(seed, 9, unary_only);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = random_sequence(9, t, &mut rng);
        *ids.last_mut().unwrap() = EOS;
        let eps = model.draw_noise(t, &mut rng);
        let v = model.elbo(&ids, &eps, KlEstimator::Analytic).unwrap();
        prop_assert!(v.recon <= 0.0);
        prop_assert!(v.kl >= 0.0);
        prop_assert!((v.elbo - (v.recon - v.kl)).abs() < 1e-9);
    }

    #[test]
    fn statistics_stay_in_range(lines in prop::collection::vec(prop::collection::vec("[a-c]", 0..6), 1..20)) {
        let s = gen_stats(&lines).unwrap();
        prop_assert!((0.0..=100.0).contains(&s.rho_rep));
        prop_assert!(s.rho_uni > 0.0 && s.rho_uni <= 100.0);
        prop_assert!(s.length >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn kn_conditionals_normalize_and_perplexity_ignores_order(seed in any::<u64>(), n in 1usize..=3) {
        let corpus = generate_synthetic(&SynthSpec::banded(3, 15, 0.3, 10, seed), 120).unwrap();
        let lm = fit_kn(&corpus, n, 0.75).unwrap();
        for ctx in lm.observed_contexts().iter().take(40) {
            let total: f64 = lm.predictable().iter().map(|w| lm.prob(ctx, w)).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
        let mut reversed = corpus.clone();
        reversed.reverse();
        let a = perplexity(&lm, &corpus).unwrap();
        let b = perplexity(&lm, &reversed).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a);
    }
}
