//! Built-in oracle suites: enumeration checks of the CRF recursions,
//! finite-difference checks of the ELBO gradient, and language-model
//! normalization. Sized to finish in a few seconds.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compute::{grad_check, logsumexp, Array, ParamSet, Tape, Var};
use crate::corpus::{generate_synthetic, SynthSpec, BOS, EOS};
use crate::crf::{
    ancestral_sample, backward_pass, brute_force_log_z, conditional_factor, enumerate_scores, log_likelihood,
    pairwise_marginals, sequence_logscore, unary_marginals, ChainPotentials, Crf, CrfConfig, InteractionKind,
};
use crate::error::Result;
use crate::eval::fit_kn;
use crate::rng::SeedStream;
use crate::training::{Model, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// A randomly initialized CRF with a random latent trajectory.
#[derive(Clone, Debug)]
pub struct Instance {
    pub params: ParamSet,
    pub crf: Crf,
    pub states: Vec<Vec<f64>>,
}

impl Instance {
    /// `vocab_size` counts `BOS`; the emittable support is one smaller.
    pub fn random(
        vocab_size: usize,
        t_len: usize,
        d: usize,
        state_dim: usize,
        unary_only: bool,
        seed: u64,
    ) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = CrfConfig {
            vocab_size,
            embed_dim: d,
            state_dim,
            hidden: 8,
            interaction: InteractionKind::Diagonal,
            unary_only,
        };
        let mut params = ParamSet::new();
        let crf = Crf::register(&mut params, config, &mut rng).expect("valid dimensions");
        for slot in [crf.xu, crf.x, crf.y] {
            let shape = params.get(slot).shape().to_vec();
            *params.get_mut(slot) = Array::randn(&shape, 1.0, &mut rng);
        }
        *params.get_mut(crf.b) = Array::randn(&[vocab_size], 0.5, &mut rng);
        let states = (0..t_len)
            .map(|_| Array::randn(&[state_dim], 1.0, &mut rng).into_data())
            .collect();
        Instance { params, crf, states }
    }

    pub fn potentials(&self) -> ChainPotentials {
        self.crf
            .potentials(&self.params, &self.states)
            .expect("consistent shapes")
    }
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

/// Random emittable sequence of length `t_len`.
pub fn random_sequence<R: Rng + ?Sized>(vocab_size: usize, t_len: usize, rng: &mut R) -> Vec<usize> {
    (0..t_len).map(|_| rng.random_range(1..vocab_size)).collect()
}

pub fn partition_oracle(instances: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let v = rng.random_range(2..=6) + 1;
        let t = rng.random_range(1..=5);
        let d = rng.random_range(2..=4);
        let dp = rng.random_range(2..=4);
        let pot = Instance::random(v, t, d, dp, false, seed ^ (i as u64 + 1)).potentials();
        let dp_z = backward_pass(&pot)?.log_z;
        worst = worst.max((dp_z - brute_force_log_z(&pot)?).abs());
    }
    Ok(check(
        "log Z: backward recursion vs enumeration",
        worst < 1e-8,
        format!("max |Δ log Z| = {worst:.3e} over {instances} models"),
    ))
}

pub fn telescoping(pairs: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let v = rng.random_range(3..=12);
        let t = rng.random_range(1..=8);
        let inst = Instance::random(v, t, 3, 3, false, seed ^ (i as u64 + 7));
        let pot = inst.potentials();
        let bp = backward_pass(&pot)?;
        let seq = random_sequence(v, t, &mut rng);
        let mut sum = 0.0;
        let mut prev = BOS;
        for (k, &w) in seq.iter().enumerate() {
            sum += conditional_factor(k + 1, prev, &bp, &pot)?[w].ln();
            prev = w;
        }
        let ll = sequence_logscore(&seq, &pot)? - bp.log_z;
        worst = worst.max((sum - ll).abs());
    }
    Ok(check(
        "telescoping product of conditionals",
        worst < 1e-10,
        format!("max deviation {worst:.3e} over {pairs} pairs"),
    ))
}

/// Total variation between `samples` ancestral draws and the enumerated law.
pub fn sampler_tv(pot: &ChainPotentials, samples: usize, seed: u64) -> Result<f64> {
    let all = enumerate_scores(pot)?;
    let z = logsumexp(&all.iter().map(|x| x.1).collect::<Vec<_>>())?;
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bp = backward_pass(pot)?;
    for _ in 0..samples {
        *counts.entry(crate::crf::sample_with(pot, &bp, &mut rng)?).or_default() += 1;
    }
    let tv = 0.5
        * all
            .iter()
            .map(|(s, l)| {
                let emp = counts.get(s).copied().unwrap_or(0) as f64 / samples as f64;
                (emp - (l - z).exp()).abs()
            })
            .sum::<f64>();
    Ok(tv)
}

pub fn sampler(samples: usize, seed: u64) -> Result<Check> {
    // three emittable words, three steps
    let pot = Instance::random(4, 3, 3, 2, false, seed).potentials();
    let tv = sampler_tv(&pot, samples, seed + 1)?;
    Ok(check(
        "ancestral sampler vs enumerated distribution",
        tv < 0.01,
        format!("total variation {tv:.4} from {samples} samples"),
    ))
}

/// Max |∂ log Z / ∂ψ_t(v) − P(w_t = v)|.
pub fn marginal_gradient_gap(inst: &Instance) -> Result<f64> {
    let pot = inst.potentials();
    let bp = backward_pass(&pot)?;
    let marg = unary_marginals(&pairwise_marginals(&pot, &bp)?);
    let mut tape = Tape::new();
    let vars = inst.params.bind(&mut tape);
    let hv: Vec<Var> = inst
        .states
        .iter()
        .map(|h| tape.constant(Array::vector(h.clone())))
        .collect();
    let mut tp = inst.crf.potentials_on_tape(&mut tape, &vars, &hv)?;
    tp.unary = tp
        .unary
        .iter()
        .map(|&u| {
            let value = tape.value(u).clone();
            tape.leaf(value)
        })
        .collect();
    let lz = tp.log_partition(&mut tape)?;
    let grads = tape.backward(lz)?;
    let mut worst: f64 = 0.0;
    for (t, &u) in tp.unary.iter().enumerate() {
        for (g, m) in grads.get(u).data().iter().zip(&marg[t]) {
            worst = worst.max((g - m).abs());
        }
    }
    Ok(worst)
}

pub fn marginal_identity(seed: u64) -> Result<Check> {
    let gap = marginal_gradient_gap(&Instance::random(5, 3, 3, 2, false, seed))?;
    Ok(check(
        "∂ log Z / ∂ unary = forward-backward marginal",
        gap < 1e-6,
        format!("max gap {gap:.3e}"),
    ))
}

pub fn reduction_gap(inst: &Instance, seq: &[usize]) -> Result<f64> {
    let pot = inst.potentials();
    let ll = log_likelihood(seq, &pot)?;
    let mut independent = 0.0;
    for (t, &w) in seq.iter().enumerate() {
        let u = pot.unary(t + 1);
        independent += u[w] - logsumexp(&u[1..])?;
    }
    Ok((ll - independent).abs())
}

pub fn reduction(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let inst = Instance::random(20, 6, 4, 3, true, seed + i);
        let seq = random_sequence(20, 6, &mut rng);
        worst = worst.max(reduction_gap(&inst, &seq)?);
    }
    Ok(check(
        "unary-only likelihood = independent softmaxes",
        worst < 1e-10,
        format!("max deviation {worst:.3e}"),
    ))
}

/// Small model for ELBO gradient checks: every tensor random, nothing at a
/// symmetric point.
pub fn gradcheck_model(seed: u64) -> Model {
    let config = TrainConfig {
        state_dim: 2,
        embed_dim: 3,
        hidden: 4,
        enc_dim: 3,
        enc_emb_dim: 2,
        seed,
        ..TrainConfig::default()
    };
    let mut model = Model::new(config, 6).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for slot in 0..model.params.len() {
        if model.params.name(slot).contains(".b") {
            let shape = model.params.get(slot).shape().to_vec();
            *model.params.get_mut(slot) = Array::randn(&shape, 0.3, &mut rng);
        }
    }
    model
}

pub fn elbo_gradient(seed: u64) -> Result<Check> {
    let model = gradcheck_model(seed);
    let ids = [4, 3, 5, EOS];
    let eps = model.draw_noise(ids.len(), &mut SeedStream::new(seed).rng());
    let report = grad_check(&model.params, 1e-5, |tape, vars| {
        Ok(model.elbo_on_tape(tape, vars, &ids, &eps, 1.0)?.objective)
    })?;
    Ok(check(
        "ELBO gradient vs central differences",
        report.max_rel_error < 1e-4,
        format!(
            "max relative error {:.3e} ({} [{}])",
            report.max_rel_error, report.param, report.index
        ),
    ))
}

pub fn kn_normalization(seed: u64) -> Result<Check> {
    let spec = SynthSpec::banded(4, 20, 0.25, 12, seed);
    let corpus = generate_synthetic(&spec, 300)?;
    let mut worst: f64 = 0.0;
    for n in [2, 3] {
        let lm = fit_kn(&corpus, n, 0.75)?;
        for ctx in lm.observed_contexts().iter().take(200) {
            let total: f64 = lm.predictable().iter().map(|w| lm.prob(ctx, w)).sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    Ok(check(
        "Kneser-Ney conditionals sum to one",
        worst < 1e-6,
        format!("max deviation {worst:.3e}"),
    ))
}

pub fn sampler_point_mass(seed: u64) -> Result<Check> {
    let mut pot = Instance::random(6, 4, 3, 2, false, seed).potentials();
    for t in 1..=4 {
        pot.unary_mut(t)[3] = 200.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = ancestral_sample(&pot, &mut rng)?;
    Ok(check(
        "point-mass unary yields a constant sample",
        draw == vec![3; 4],
        format!("{draw:?}"),
    ))
}

/// Runs every suite; an internal error counts as a failure of that suite.
pub fn run_all(seed: u64) -> Vec<Check> {
    type Suite = (&'static str, Box<dyn Fn(u64) -> Result<Check>>);
    let suites: Vec<Suite> = vec![
        ("log Z oracle", Box::new(|s| partition_oracle(100, s))),
        ("telescoping", Box::new(|s| telescoping(200, s))),
        ("sampler", Box::new(|s| sampler(200_000, s))),
        ("point mass", Box::new(sampler_point_mass)),
        ("marginals", Box::new(marginal_identity)),
        ("reduction", Box::new(reduction)),
        ("ELBO gradient", Box::new(elbo_gradient)),
        ("Kneser-Ney", Box::new(kn_normalization)),
    ];
    suites
        .into_iter()
        .map(|(name, f)| {
            f(seed).unwrap_or_else(|e| Check {
                name,
                passed: false,
                detail: format!("error: {e}"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for c in run_all(1) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
