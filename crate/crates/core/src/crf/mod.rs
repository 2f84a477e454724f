//! Globally normalized linear-chain CRF observation model `p(w | h)`.
//!
//! [`chain`] holds inference on fixed potentials. This module maps a latent
//! trajectory to potentials through the learned parameters, both as plain
//! arrays (sampling, evaluation) and on a tape (training).

pub mod chain;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use chain::{
    ancestral_sample, backward_pass, brute_force_log_z, conditional_factor, enumerate_scores, log_likelihood,
    pairwise_marginals, sample_with, sequence_logscore, unary_marginals, BackwardPass, ChainPotentials, Interaction,
    PairwiseOperator, StepOperator,
};

use crate::compute::{matvec, matvec_t, softplus, Array, Mlp, ParamSet, Tape, Var};
use crate::corpus::BOS;
use crate::error::{Error, Result};

/// Floor added to the interaction network output after softplus.
pub const POSITIVITY_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InteractionKind {
    #[default]
    Diagonal,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfConfig {
    /// Vocabulary size including the reserved ids.
    pub vocab_size: usize,
    /// Embedding dimension d.
    pub embed_dim: usize,
    /// Latent state dimension d′.
    pub state_dim: usize,
    /// Hidden width of the interaction network.
    pub hidden: usize,
    pub interaction: InteractionKind,
    pub unary_only: bool,
}

/// Slots of the CRF tensors inside a model-wide [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Crf {
    pub config: CrfConfig,
    pub xu: usize,
    pub x: usize,
    pub y: usize,
    pub p: usize,
    pub b: usize,
    pub s_mlp: Mlp,
}

impl Crf {
    pub fn register<R: Rng + ?Sized>(params: &mut ParamSet, config: CrfConfig, rng: &mut R) -> Result<Crf> {
        let (v, d, dp) = (config.vocab_size, config.embed_dim, config.state_dim);
        if v < 2 || d == 0 || dp == 0 || config.hidden == 0 {
            return Err(Error::InvalidConfig(format!(
                "CRF dimensions must be positive (|V|={v}, d={d}, d'={dp}, hidden={})",
                config.hidden
            )));
        }
        let xu = params.insert("crf.xu", Array::randn(&[d, v], 0.1, rng));
        let x = params.insert("crf.X", Array::randn(&[d, v], 0.1, rng));
        let y = params.insert("crf.Y", Array::randn(&[d, v], 0.1, rng));
        let p = params.insert("crf.P", Array::uniform(&[d, dp], (6.0 / (d + dp) as f64).sqrt(), rng));
        let b = params.insert("crf.b", Array::zeros(&[v]));
        let out = match config.interaction {
            InteractionKind::Diagonal => d,
            InteractionKind::Full => d * d,
        };
        let s_mlp = Mlp::register(params, "crf.s_mlp", (2 * dp, config.hidden, out), 1.0, rng);
        Ok(Crf {
            config,
            xu,
            x,
            y,
            p,
            b,
            s_mlp,
        })
    }

    /// Finds the CRF tensors in a loaded parameter set.
    pub fn locate(params: &ParamSet, config: CrfConfig) -> Result<Crf> {
        let slot = |n: &str| {
            params
                .index_of(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {n}")))
        };
        let crf = Crf {
            xu: slot("crf.xu")?,
            x: slot("crf.X")?,
            y: slot("crf.Y")?,
            p: slot("crf.P")?,
            b: slot("crf.b")?,
            s_mlp: Mlp::locate(params, "crf.s_mlp")?,
            config,
        };
        let (d, v) = (crf.config.embed_dim, crf.config.vocab_size);
        if params.get(crf.x).shape() != [d, v] || params.get(crf.p).shape() != [d, crf.config.state_dim] {
            return Err(Error::Checkpoint(
                "CRF tensor shapes disagree with the configuration".into(),
            ));
        }
        Ok(crf)
    }

    /// `ψ(·; h) = xuᵀ (P h) + b`.
    pub fn unary_logpot(&self, params: &ParamSet, h: &[f64]) -> Vec<f64> {
        let (d, v, dp) = (self.config.embed_dim, self.config.vocab_size, self.config.state_dim);
        let ph = matvec(params.get(self.p).data(), d, dp, h);
        let mut u = matvec_t(params.get(self.xu).data(), d, v, &ph);
        for (ui, bi) in u.iter_mut().zip(params.get(self.b).data()) {
            *ui += bi;
        }
        u
    }

    /// `S(h_prev, h) = softplus(MLP([h_prev; h])) + floor`.
    pub fn interaction(&self, params: &ParamSet, h_prev: &[f64], h: &[f64]) -> Interaction {
        let input: Vec<f64> = h_prev.iter().chain(h).copied().collect();
        let s: Vec<f64> = self
            .s_mlp
            .forward_plain(params, &input)
            .into_iter()
            .map(|z| softplus(z) + POSITIVITY_FLOOR)
            .collect();
        match self.config.interaction {
            InteractionKind::Diagonal => Interaction::Diagonal(s),
            InteractionKind::Full => {
                let d = self.config.embed_dim;
                Interaction::Full(Array::matrix(d, d, s).expect("d*d interaction output"))
            }
        }
    }

    /// Positive factors `(exp X, exp Y)`, shared across steps.
    pub fn positive_factors(&self, params: &ParamSet) -> (Arc<Array>, Arc<Array>) {
        (
            Arc::new(params.get(self.x).map(f64::exp)),
            Arc::new(params.get(self.y).map(f64::exp)),
        )
    }

    pub fn pairwise_operator(&self, params: &ParamSet, h_prev: &[f64], h: &[f64]) -> PairwiseOperator {
        let (left, right) = self.positive_factors(params);
        PairwiseOperator::new(left, right, self.interaction(params, h_prev, h)).expect("consistent shapes")
    }

    /// Potentials for the trajectory `h_{1:T}` with `h₀ = 0`.
    pub fn potentials(&self, params: &ParamSet, states: &[Vec<f64>]) -> Result<ChainPotentials> {
        let v = self.config.vocab_size;
        let unary = states.iter().map(|h| self.unary_logpot(params, h)).collect();
        let steps = if self.config.unary_only {
            vec![StepOperator::Ones(v); states.len()]
        } else {
            let (left, right) = self.positive_factors(params);
            let zero = vec![0.0; self.config.state_dim];
            states
                .iter()
                .enumerate()
                .map(|(i, h)| {
                    let prev = if i == 0 { &zero } else { &states[i - 1] };
                    PairwiseOperator::new(left.clone(), right.clone(), self.interaction(params, prev, h))
                        .map(StepOperator::Factored)
                })
                .collect::<Result<Vec<_>>>()?
        };
        ChainPotentials::new(unary, steps)
    }

    pub fn unary_on_tape(&self, tape: &mut Tape, vars: &[Var], h: Var) -> Result<Var> {
        let ph = tape.matvec(vars[self.p], h)?;
        let u = tape.matvec_t(vars[self.xu], ph)?;
        tape.add(u, vars[self.b])
    }

    pub fn interaction_on_tape(&self, tape: &mut Tape, vars: &[Var], h_prev: Var, h: Var) -> Result<Var> {
        let input = tape.concat(&[h_prev, h])?;
        let z = self.s_mlp.forward(tape, vars, input)?;
        let s = tape.softplus(z);
        let s = tape.add_const(s, POSITIVITY_FLOOR);
        match self.config.interaction {
            InteractionKind::Diagonal => Ok(s),
            InteractionKind::Full => {
                let d = self.config.embed_dim;
                tape.reshape(s, &[d, d])
            }
        }
    }

    /// Tape potentials for `h_{1:T}` (`h₀ = 0`).
    pub fn potentials_on_tape(&self, tape: &mut Tape, vars: &[Var], states: &[Var]) -> Result<TapePotentials> {
        let unary = states
            .iter()
            .map(|&h| self.unary_on_tape(tape, vars, h))
            .collect::<Result<Vec<_>>>()?;
        let pairwise = if self.config.unary_only {
            TapePairwise::Ones
        } else {
            let left = tape.exp(vars[self.x]);
            let right = tape.exp(vars[self.y]);
            let mut prev = tape.constant(Array::zeros(&[self.config.state_dim]));
            let mut interactions = Vec::with_capacity(states.len());
            for &h in states {
                interactions.push(self.interaction_on_tape(tape, vars, prev, h)?);
                prev = h;
            }
            TapePairwise::Factored {
                left,
                right,
                interactions,
                kind: self.config.interaction,
            }
        };
        Ok(TapePotentials {
            vocab_size: self.config.vocab_size,
            unary,
            pairwise,
        })
    }
}

/// Pairwise terms recorded on a tape.
#[derive(Clone, Debug)]
pub enum TapePairwise {
    Factored {
        left: Var,
        right: Var,
        interactions: Vec<Var>,
        kind: InteractionKind,
    },
    Ones,
}

/// Chain potentials as tape nodes.
#[derive(Clone, Debug)]
pub struct TapePotentials {
    pub vocab_size: usize,
    pub unary: Vec<Var>,
    pub pairwise: TapePairwise,
}

impl TapePotentials {
    fn apply_step(&self, tape: &mut Tape, i: usize, v: Var, ones: Var) -> Result<Var> {
        match &self.pairwise {
            TapePairwise::Factored {
                left,
                right,
                interactions,
                kind,
            } => {
                let a = tape.matvec(*right, v)?;
                let b = match kind {
                    InteractionKind::Diagonal => tape.mul(interactions[i], a)?,
                    InteractionKind::Full => tape.matvec(interactions[i], a)?,
                };
                tape.matvec_t(*left, b)
            }
            TapePairwise::Ones => {
                let s = tape.sum(v);
                tape.mul_scalar(ones, s)
            }
        }
    }

    /// `log Z` through the scaled backward recursion, differentiable in
    /// every potential.
    pub fn log_partition(&self, tape: &mut Tape) -> Result<Var> {
        let n = self.vocab_size;
        let mask = tape.constant(Array::vector(
            (0..n).map(|w| if w == BOS { 0.0 } else { 1.0 }).collect(),
        ));
        let ones = tape.constant(Array::filled(&[n], 1.0));
        let mut beta = tape.constant(Array::filled(&[n], 1.0 / n as f64));
        let mut logs = vec![tape.constant(Array::scalar((n as f64).ln()))];
        for i in (0..self.unary.len()).rev() {
            let u = self.unary[i];
            let m = tape
                .value(u)
                .data()
                .iter()
                .enumerate()
                .filter(|&(w, _)| w != BOS)
                .map(|(_, &x)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return Err(Error::NumericOverflow { step: i + 1 });
            }
            let shifted = tape.add_const(u, -m);
            let o = tape.exp(shifted);
            let o = tape.mul(o, mask)?;
            let v = tape.mul(o, beta)?;
            let raw = self.apply_step(tape, i, v, ones)?;
            let total = tape.sum(raw);
            let t = tape.scalar_value(total);
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::NumericOverflow { step: i + 1 });
            }
            beta = tape.div_scalar(raw, total)?;
            let lt = tape.log(total);
            logs.push(tape.add_const(lt, m));
        }
        let first = tape.pick(beta, BOS)?;
        logs.push(tape.log(first));
        let log_z = tape.add_n(&logs)?;
        if !tape.scalar_value(log_z).is_finite() {
            return Err(Error::NumericOverflow { step: 1 });
        }
        Ok(log_z)
    }

    /// Energy `S(w; h)` of `seq` (length T, `w₀ = BOS`).
    pub fn score(&self, tape: &mut Tape, seq: &[usize]) -> Result<Var> {
        if seq.len() != self.unary.len() {
            return Err(Error::InvalidSequence(format!(
                "sequence of length {} scored against a chain of length {}",
                seq.len(),
                self.unary.len()
            )));
        }
        let mut terms = Vec::with_capacity(2 * seq.len());
        let mut prev = BOS;
        for (i, &w) in seq.iter().enumerate() {
            if w >= self.vocab_size {
                return Err(Error::OutOfVocabulary {
                    id: w,
                    size: self.vocab_size,
                });
            }
            if w == BOS {
                return Err(Error::InvalidSequence("BOS cannot be emitted".into()));
            }
            terms.push(tape.pick(self.unary[i], w)?);
            if let TapePairwise::Factored {
                left,
                right,
                interactions,
                kind,
            } = &self.pairwise
            {
                let cx = tape.column(*left, prev)?;
                let cy = tape.column(*right, w)?;
                let sy = match kind {
                    InteractionKind::Diagonal => tape.mul(interactions[i], cy)?,
                    InteractionKind::Full => tape.matvec(interactions[i], cy)?,
                };
                let prod = tape.mul(cx, sy)?;
                let entry = tape.sum(prod);
                terms.push(tape.log(entry));
            }
            prev = w;
        }
        tape.add_n(&terms)
    }

    /// `(S(w; h), log Z, log p(w | h))`.
    pub fn log_likelihood(&self, tape: &mut Tape, seq: &[usize]) -> Result<(Var, Var, Var)> {
        let score = self.score(tape, seq)?;
        let log_z = self.log_partition(tape)?;
        let ll = tape.sub(score, log_z)?;
        Ok((score, log_z, ll))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::{grad_check, logsumexp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(v: usize, d: usize, dp: usize, kind: InteractionKind, unary_only: bool) -> CrfConfig {
        CrfConfig {
            vocab_size: v,
            embed_dim: d,
            state_dim: dp,
            hidden: 6,
            interaction: kind,
            unary_only,
        }
    }

    fn model(cfg: CrfConfig, seed: u64) -> (ParamSet, Crf) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let crf = Crf::register(&mut params, cfg, &mut rng).unwrap();
        // Spread the factors so the test instances are far from uniform.
        for slot in [crf.xu, crf.x, crf.y] {
            *params.get_mut(slot) = Array::randn(params.get(slot).shape(), 0.8, &mut rng);
        }
        *params.get_mut(crf.b) = Array::randn(&[crf.config.vocab_size], 0.5, &mut rng);
        (params, crf)
    }

    fn states(t: usize, dp: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t).map(|_| Array::randn(&[dp], 1.0, &mut rng).into_data()).collect()
    }

    #[test]
    fn unary_is_linear_in_state() {
        let (mut params, crf) = model(config(6, 3, 2, InteractionKind::Diagonal, false), 1);
        params.get_mut(crf.b).data_mut().fill(0.0);
        assert!(crf.unary_logpot(&params, &[0.0, 0.0]).iter().all(|&x| x == 0.0));
        let h = [0.3, -1.2];
        let base = crf.unary_logpot(&params, &h);
        let scaled = crf.unary_logpot(&params, &[0.3 * 2.5, -1.2 * 2.5]);
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a * 2.5 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unary_gradient_wrt_projection() {
        let (params, crf) = model(config(5, 3, 2, InteractionKind::Diagonal, false), 2);
        let h = Array::vector(vec![0.7, -0.4]);
        let weights = Array::vector(vec![0.3, -1.0, 0.5, 2.0, -0.7]);
        let report = grad_check(&params, 1e-5, |tape, vars| {
            let hv = tape.constant(h.clone());
            let u = crf.unary_on_tape(tape, vars, hv)?;
            let w = tape.constant(weights.clone());
            let p = tape.mul(u, w)?;
            Ok(tape.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn operator_entries_are_positive() {
        for seed in 0..100 {
            let (params, crf) = model(config(5, 3, 2, InteractionKind::Diagonal, false), seed);
            let hs = states(2, 2, seed + 1000);
            let dense = crf.pairwise_operator(&params, &hs[0], &hs[1]).materialize();
            assert!(dense.data().iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn constant_interaction_makes_operator_state_free() {
        let (mut params, crf) = model(config(5, 3, 2, InteractionKind::Diagonal, false), 3);
        crf.s_mlp.zero_output(&mut params);
        let a = crf.pairwise_operator(&params, &[1.0, 2.0], &[0.0, -1.0]).materialize();
        let b = crf.pairwise_operator(&params, &[-3.0, 0.5], &[4.0, 1.0]).materialize();
        assert_eq!(a, b);
    }

    #[test]
    fn plain_and_tape_log_likelihood_agree() {
        for kind in [InteractionKind::Diagonal, InteractionKind::Full] {
            for unary_only in [false, true] {
                let (params, crf) = model(config(6, 3, 2, kind, unary_only), 5);
                let hs = states(4, 2, 6);
                let pot = crf.potentials(&params, &hs).unwrap();
                let seq = [4, 2, 5, 1];
                let plain = log_likelihood(&seq, &pot).unwrap();
                let mut tape = Tape::new();
                let vars = params.bind(&mut tape);
                let hv: Vec<Var> = hs.iter().map(|h| tape.constant(Array::vector(h.clone()))).collect();
                let tp = crf.potentials_on_tape(&mut tape, &vars, &hv).unwrap();
                let (_, lz, ll) = tp.log_likelihood(&mut tape, &seq).unwrap();
                assert!((tape.scalar_value(ll) - plain).abs() < 1e-10);
                assert!((tape.scalar_value(lz) - brute_force_log_z(&pot).unwrap()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn unary_only_likelihood_is_sum_of_softmaxes() {
        let (params, crf) = model(config(6, 3, 2, InteractionKind::Diagonal, true), 7);
        let hs = states(5, 2, 8);
        let pot = crf.potentials(&params, &hs).unwrap();
        let seq = [3, 3, 5, 2, 1];
        let ll = log_likelihood(&seq, &pot).unwrap();
        let mut expect = 0.0;
        let mut lz = 0.0;
        for (t, &w) in seq.iter().enumerate() {
            let u = crf.unary_logpot(&params, &hs[t]);
            let lse = logsumexp(&u[1..]).unwrap();
            expect += u[w] - lse;
            lz += lse;
        }
        assert!((ll - expect).abs() < 1e-10);
        assert!((backward_pass(&pot).unwrap().log_z - lz).abs() < 1e-10);
        assert!((brute_force_log_z(&pot).unwrap() - lz).abs() < 1e-8);
        // conditionals ignore the previous word
        let bp = backward_pass(&pot).unwrap();
        let a = conditional_factor(3, 2, &bp, &pot).unwrap();
        let b = conditional_factor(3, 5, &bp, &pot).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn log_z_gradient_equals_unary_marginals() {
        let (params, crf) = model(config(5, 3, 2, InteractionKind::Diagonal, false), 11);
        let hs = states(3, 2, 12);
        let pot = crf.potentials(&params, &hs).unwrap();
        let bp = backward_pass(&pot).unwrap();
        let marg = unary_marginals(&pairwise_marginals(&pot, &bp).unwrap());

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let hv: Vec<Var> = hs.iter().map(|h| tape.constant(Array::vector(h.clone()))).collect();
        let mut tp = crf.potentials_on_tape(&mut tape, &vars, &hv).unwrap();
        tp.unary = tp
            .unary
            .iter()
            .map(|&u| {
                let value = tape.value(u).clone();
                tape.leaf(value)
            })
            .collect();
        let lz = tp.log_partition(&mut tape).unwrap();
        let grads = tape.backward(lz).unwrap();
        for t in 0..3 {
            let g = grads.get(tp.unary[t]);
            for v in 0..5 {
                assert!((g.data()[v] - marg[t][v]).abs() < 1e-6, "t={t} v={v}");
            }
        }
    }

    #[test]
    fn future_state_changes_first_conditional() {
        let (params, crf) = model(config(6, 3, 2, InteractionKind::Diagonal, false), 13);
        let mut hs = states(4, 2, 14);
        let first = |hs: &[Vec<f64>]| {
            let pot = crf.potentials(&params, hs).unwrap();
            let bp = backward_pass(&pot).unwrap();
            conditional_factor(1, BOS, &bp, &pot).unwrap()
        };
        let before = first(&hs);
        hs[3][0] += 1.0;
        let after = first(&hs);
        let diff: f64 = before.iter().zip(&after).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn locate_recovers_slots() {
        let cfg = config(5, 3, 2, InteractionKind::Full, false);
        let (params, crf) = model(cfg.clone(), 1);
        assert_eq!(Crf::locate(&params, cfg).unwrap(), crf);
    }
}
