use rand::Rng;

use super::TrainConfig;
use crate::compute::{Array, Gradients, ParamSet, Tape, Var};
use crate::corpus::{LengthHistogram, EOS};
use crate::crf::{backward_pass, log_likelihood, sample_with, Crf, CrfConfig};
use crate::dynamics::{gaussian_kl, kl_on_tape, reparam_on_tape, reparam_sample, standard_normal, DynConfig, Dynamics};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Latent chain plus CRF observation model over one parameter set.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab_size: usize,
    pub params: ParamSet,
    pub crf: Crf,
    pub dynamics: Dynamics,
}

/// Tape nodes of one ELBO evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    /// `recon - kl_weight · kl`.
    pub objective: Var,
    pub recon: Var,
    pub kl: Var,
}

/// Plain values of one ELBO evaluation (`elbo` uses KL weight 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboValue {
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
}

/// How the latent term of the ELBO is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlEstimator {
    /// Closed-form per-step KL given the sampled prefix.
    Analytic,
    /// `log p(h̃) - log q(h̃ | w)` at the sampled trajectory.
    Sampled,
}

impl Model {
    /// Fresh parameters drawn from the `init` substream of the config seed.
    pub fn new(config: TrainConfig, vocab_size: usize) -> Result<Model> {
        config.validate()?;
        let mut rng = SeedStream::new(config.seed).substream("init").rng();
        let mut params = ParamSet::new();
        let dynamics = Dynamics::register(&mut params, dyn_config(&config, vocab_size), &mut rng)?;
        let crf = Crf::register(&mut params, crf_config(&config, vocab_size), &mut rng)?;
        Ok(Model {
            config,
            vocab_size,
            params,
            crf,
            dynamics,
        })
    }

    /// Rebinds a model to an existing parameter set (e.g. from a checkpoint).
    pub fn from_params(config: TrainConfig, vocab_size: usize, params: ParamSet) -> Result<Model> {
        config.validate()?;
        let dynamics = Dynamics::locate(&params, dyn_config(&config, vocab_size))?;
        let crf = Crf::locate(&params, crf_config(&config, vocab_size))?;
        Ok(Model {
            config,
            vocab_size,
            params,
            crf,
            dynamics,
        })
    }

    /// Switches between the full model and its unary-only restriction.
    pub fn set_unary_only(&mut self, unary_only: bool) {
        self.config.unary_only = unary_only;
        self.crf.config.unary_only = unary_only;
    }

    pub fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    /// Standard-normal noise for a sentence of length `t_len`.
    pub fn draw_noise<R: Rng + ?Sized>(&self, t_len: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..t_len).map(|_| standard_normal(self.state_dim(), rng)).collect()
    }

    /// Single-trajectory ELBO with frozen noise `eps[t]`.
    pub fn elbo_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        ids: &[usize],
        eps: &[Vec<f64>],
        kl_weight: f64,
    ) -> Result<ElboTerms> {
        if eps.len() != ids.len() {
            return Err(Error::InvalidSequence(format!(
                "{} noise vectors for a sentence of length {}",
                eps.len(),
                ids.len()
            )));
        }
        let codes = self.dynamics.encode_suffix_on_tape(tape, vars, ids)?;
        let mut h_prev = tape.constant(Array::zeros(&[self.state_dim()]));
        let mut states = Vec::with_capacity(ids.len());
        let mut kls = Vec::with_capacity(ids.len());
        for (t, e) in codes.iter().enumerate() {
            let q = self.dynamics.posterior_on_tape(tape, vars, h_prev, *e)?;
            let p = self.dynamics.prior_on_tape(tape, vars, h_prev)?;
            kls.push(kl_on_tape(tape, q, p)?);
            let h = reparam_on_tape(tape, q, &eps[t])?;
            states.push(h);
            h_prev = h;
        }
        let kl = tape.add_n(&kls)?;
        let pot = self.crf.potentials_on_tape(tape, vars, &states)?;
        let (_, _, recon) = pot.log_likelihood(tape, ids)?;
        if !tape.scalar_value(recon).is_finite() {
            return Err(Error::NonFinite {
                component: "reconstruction",
            });
        }
        if !tape.scalar_value(kl).is_finite() {
            return Err(Error::NonFinite { component: "kl" });
        }
        let weighted = tape.scale(kl, kl_weight);
        let objective = tape.sub(recon, weighted)?;
        Ok(ElboTerms { objective, recon, kl })
    }

    /// ELBO value and gradient of `objective` for one sentence.
    pub fn elbo_gradient(
        &self,
        ids: &[usize],
        eps: &[Vec<f64>],
        kl_weight: f64,
    ) -> Result<(ElboValue, Vec<Var>, Gradients)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let terms = self.elbo_on_tape(&mut tape, &vars, ids, eps, kl_weight)?;
        let recon = tape.scalar_value(terms.recon);
        let kl = tape.scalar_value(terms.kl);
        let grads = tape.backward(terms.objective)?;
        Ok((
            ElboValue {
                elbo: recon - kl,
                recon,
                kl,
            },
            vars,
            grads,
        ))
    }

    /// ELBO without a tape.
    pub fn elbo(&self, ids: &[usize], eps: &[Vec<f64>], estimator: KlEstimator) -> Result<ElboValue> {
        let codes = self.dynamics.encode_suffix(&self.params, ids)?;
        let mut h_prev = vec![0.0; self.state_dim()];
        let mut states = Vec::with_capacity(ids.len());
        let mut kl = 0.0;
        for (t, e) in codes.iter().enumerate() {
            let q = self.dynamics.posterior_step(&self.params, &h_prev, e);
            let p = self.dynamics.prior_step(&self.params, &h_prev);
            let h = reparam_sample(&q, &eps[t]);
            kl += match estimator {
                KlEstimator::Analytic => gaussian_kl(&q, &p),
                KlEstimator::Sampled => q.log_density(&h) - p.log_density(&h),
            };
            states.push(h.clone());
            h_prev = h;
        }
        let pot = self.crf.potentials(&self.params, &states)?;
        let recon = log_likelihood(ids, &pot)?;
        Ok(ElboValue {
            elbo: recon - kl,
            recon,
            kl,
        })
    }

    /// Draws `h_{1:T}` from the prior, then `w_{1:T}` from the CRF.
    pub fn sample_ids<R: Rng + ?Sized>(&self, t_len: usize, rng: &mut R) -> Result<Vec<usize>> {
        let states = self.dynamics.prior_sample(&self.params, t_len, rng);
        let pot = self.crf.potentials(&self.params, &states)?;
        let bp = backward_pass(&pot)?;
        sample_with(&pot, &bp, rng)
    }

    /// Sentence `index` of the generation stream for `seed`: the length comes
    /// from `lengths`, and the output stops before the first `EOS`.
    pub fn generate_one(&self, lengths: &LengthSource, seed: u64, index: u64) -> Result<Vec<usize>> {
        let mut rng = SeedStream::new(seed).substream("generation").rng_at(index);
        let t_len = match lengths {
            LengthSource::Histogram(h) => h.sample(&mut rng),
            LengthSource::Fixed(t) => *t,
        };
        let mut ids = self.sample_ids(t_len, &mut rng)?;
        if let Some(end) = ids.iter().position(|&w| w == EOS) {
            ids.truncate(end);
        }
        Ok(ids)
    }
}

/// Where generation draws the chain length T from.
#[derive(Clone, Debug, PartialEq)]
pub enum LengthSource {
    Histogram(LengthHistogram),
    Fixed(usize),
}

fn crf_config(c: &TrainConfig, vocab_size: usize) -> CrfConfig {
    CrfConfig {
        vocab_size,
        embed_dim: c.embed_dim,
        state_dim: c.state_dim,
        hidden: c.hidden,
        interaction: c.interaction,
        unary_only: c.unary_only,
    }
}

fn dyn_config(c: &TrainConfig, vocab_size: usize) -> DynConfig {
    DynConfig {
        vocab_size,
        state_dim: c.state_dim,
        hidden: c.hidden,
        enc_dim: c.enc_dim,
        emb_dim: c.enc_emb_dim,
    }
}
