//! ELBO training with Adam over length-bucketed batches, checkpoints, and
//! generation from trained models.

mod model;
mod store;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use model::{ElboTerms, ElboValue, KlEstimator, LengthSource, Model};
pub use store::{load_model, save_model, Bundle};

use crate::compute::{AdamConfig, AdamState};
use crate::corpus::TokenSeq;
use crate::crf::InteractionKind;
use crate::error::{Error, Result};
use crate::rng::SeedStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Latent state dimension d′.
    pub state_dim: usize,
    /// CRF embedding dimension d.
    pub embed_dim: usize,
    /// Hidden width of every feed-forward network.
    pub hidden: usize,
    /// Suffix encoder state width.
    pub enc_dim: usize,
    /// Suffix encoder word-embedding width.
    pub enc_emb_dim: usize,
    pub interaction: InteractionKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer steps over which the KL weight rises linearly from 0.
    pub kl_warmup: u64,
    /// KL weight reached after warmup.
    pub kl_weight: f64,
    pub unary_only: bool,
    pub seed: u64,
    /// Longest accepted sentence, in words before `EOS`.
    pub max_len: usize,
    /// Vocabulary size cap including the reserved ids.
    pub vocab_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            state_dim: 16,
            embed_dim: 100,
            hidden: 64,
            enc_dim: 64,
            enc_emb_dim: 32,
            interaction: InteractionKind::Diagonal,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 20,
            kl_warmup: 5000,
            kl_weight: 1.0,
            unary_only: false,
            seed: 0,
            max_len: 15,
            vocab_cap: 15003,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("state_dim", self.state_dim),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("enc_dim", self.enc_dim),
            ("enc_emb_dim", self.enc_emb_dim),
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.vocab_cap < 4 {
            return Err(Error::InvalidConfig("vocab_cap must be at least 4".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::InvalidConfig("kl_weight must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// KL weight used for the optimizer step after `step` completed steps.
    pub fn kl_weight_at(&self, step: u64) -> f64 {
        if self.kl_warmup == 0 {
            self.kl_weight
        } else {
            self.kl_weight * (step as f64 / self.kl_warmup as f64).min(1.0)
        }
    }
}

/// Same configuration restricted to unary potentials.
pub fn ablate_unary(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        unary_only: true,
        ..config.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean ELBO with KL weight 1.
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub seconds: f64,
    /// Optimizer steps completed at the end of the epoch.
    pub steps: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,elbo,recon,kl,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{:.3}", r.epoch, r.elbo, r.recon, r.kl, r.seconds);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Epoch-mean ELBO values in order.
    pub fn elbos(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.elbo).collect()
    }
}

/// Batches of equal-length sentence indices for one epoch.
fn epoch_batches(corpus: &[TokenSeq], batch_size: usize, stream: SeedStream, epoch: usize) -> Vec<Vec<usize>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.iter().enumerate() {
        buckets.entry(s.len()).or_default().push(i);
    }
    let mut rng = stream.rng_at(epoch as u64);
    let mut batches = Vec::new();
    for (_, mut idx) in buckets {
        idx.shuffle(&mut rng);
        batches.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Noise for sentence `index` in `epoch`; independent of batch layout.
pub fn sentence_noise(model: &Model, epoch: usize, index: usize, t_len: usize) -> Vec<Vec<f64>> {
    let mut rng = SeedStream::new(model.config.seed)
        .substream("training-noise")
        .child(epoch as u64)
        .rng_at(index as u64);
    model.draw_noise(t_len, &mut rng)
}

/// Runs `model.config.epochs` epochs of Adam on `-ELBO`, calling `on_epoch`
/// after each one. A non-finite loss or parameter aborts the run with an
/// error before the offending update is applied.
pub fn train<F>(model: &mut Model, corpus: &[TokenSeq], mut on_epoch: F) -> Result<TrainLog>
where
    F: FnMut(&Model, &EpochRow) -> Result<()>,
{
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(s) = corpus.iter().find(|s| s.ids().iter().any(|&w| w >= model.vocab_size)) {
        return Err(Error::OutOfVocabulary {
            id: *s.ids().iter().max().expect("non-empty"),
            size: model.vocab_size,
        });
    }
    let config = model.config.clone();
    let adam_config = AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_config, &model.params);
    let batch_stream = SeedStream::new(config.seed).substream("batches");
    let mut log = TrainLog::default();

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let (mut elbo, mut recon, mut kl) = (0.0, 0.0, 0.0);
        for batch in epoch_batches(corpus, config.batch_size, batch_stream, epoch) {
            let weight = config.kl_weight_at(adam.step_count());
            let mut acc = model.params.zeros_like();
            let scale = -1.0 / batch.len() as f64;
            for &i in &batch {
                let ids = corpus[i].ids();
                let eps = sentence_noise(model, epoch, i, ids.len());
                let (value, vars, grads) = model.elbo_gradient(ids, &eps, weight)?;
                for (slot, a) in acc.iter_mut().enumerate() {
                    grads.accumulate_into(vars[slot], scale, a);
                }
                elbo += value.elbo;
                recon += value.recon;
                kl += value.kl;
            }
            if acc.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFinite { component: "gradient" });
            }
            adam.step(&mut model.params, &acc)?;
            if !model.params.all_finite() {
                return Err(Error::NonFinite {
                    component: "parameters",
                });
            }
        }
        let n = corpus.len() as f64;
        let row = EpochRow {
            epoch,
            elbo: elbo / n,
            recon: recon / n,
            kl: kl / n,
            seconds: start.elapsed().as_secs_f64(),
            steps: adam.step_count(),
        };
        log.rows.push(row);
        on_epoch(model, &row)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::{grad_check, Array};
    use crate::corpus::{Vocab, EOS};
    use crate::crf::{brute_force_log_z, log_likelihood};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            state_dim: 2,
            embed_dim: 3,
            hidden: 4,
            enc_dim: 3,
            enc_emb_dim: 2,
            batch_size: 2,
            epochs: 2,
            kl_warmup: 3,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn corpus(v: usize) -> Vec<TokenSeq> {
        [
            vec![3, 4, EOS],
            vec![4, EOS],
            vec![5, 3, 4, EOS],
            vec![3, EOS],
            vec![5, 5, EOS],
        ]
        .into_iter()
        .map(|ids| TokenSeq::new(ids, v).unwrap())
        .collect()
    }

    #[test]
    fn defaults_follow_the_reference_sizes() {
        let c = TrainConfig::default();
        assert_eq!((c.state_dim, c.embed_dim, c.max_len, c.vocab_cap), (16, 100, 15, 15003));
        assert!(ablate_unary(&c).unary_only);
        c.validate().unwrap();
    }

    #[test]
    fn kl_weight_ramps_linearly() {
        let c = TrainConfig {
            kl_warmup: 4,
            ..TrainConfig::default()
        };
        let w: Vec<f64> = (0..6).map(|s| c.kl_weight_at(s)).collect();
        assert_eq!(w, vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.0]);
    }

    #[test]
    fn uniform_unary_model_without_kl_scores_uniformly() {
        let mut model = Model::new(ablate_unary(&tiny_config()), 6).unwrap();
        for slot in [model.crf.b, model.crf.xu] {
            model.params.get_mut(slot).data_mut().fill(0.0);
        }
        let ids = [3, 4, EOS];
        let eps = model.draw_noise(3, &mut SeedStream::new(1).rng());
        let mut tape = crate::compute::Tape::new();
        let vars = model.params.bind(&mut tape);
        let terms = model.elbo_on_tape(&mut tape, &vars, &ids, &eps, 0.0).unwrap();
        // five emittable words at each of three steps
        assert!((tape.scalar_value(terms.objective) + 3.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn elbo_gradient_passes_finite_differences() {
        for interaction in [InteractionKind::Diagonal, InteractionKind::Full] {
            let config = TrainConfig {
                interaction,
                ..tiny_config()
            };
            let model = Model::new(config, 6).unwrap();
            let ids = [4, 3, 5, EOS];
            let eps = model.draw_noise(4, &mut SeedStream::new(2).rng());
            let report = grad_check(&model.params, 1e-5, |tape, vars| {
                Ok(model.elbo_on_tape(tape, vars, &ids, &eps, 0.7)?.objective)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn plain_and_tape_elbo_agree() {
        let model = Model::new(tiny_config(), 6).unwrap();
        let ids = [5, 3, EOS];
        let eps = model.draw_noise(3, &mut SeedStream::new(3).rng());
        let plain = model.elbo(&ids, &eps, KlEstimator::Analytic).unwrap();
        let (value, _, _) = model.elbo_gradient(&ids, &eps, 1.0).unwrap();
        assert!((plain.elbo - value.elbo).abs() < 1e-10);
        assert!(value.recon < 0.0 && value.kl >= 0.0);
    }

    #[test]
    fn elbo_is_below_marginal_likelihood() {
        // One latent dimension and one step: log p(w) by grid integration.
        let config = TrainConfig {
            state_dim: 1,
            ..tiny_config()
        };
        let mut model = Model::new(config, 5).unwrap();
        let mut rng = SeedStream::new(11).rng();
        for slot in [model.crf.xu, model.crf.p] {
            let shape = model.params.get(slot).shape().to_vec();
            *model.params.get_mut(slot) = Array::randn(&shape, 1.5, &mut rng);
        }
        let ids = [EOS];
        let prior = model.dynamics.prior_step(&model.params, &[0.0]);
        let (mu, sd) = (prior.mean[0], (0.5 * prior.log_var[0]).exp());
        let grid = |f: &dyn Fn(f64) -> f64| -> f64 {
            let n = 20_000;
            let (lo, hi) = (-10.0, 10.0);
            let dz = (hi - lo) / n as f64;
            (0..=n)
                .map(|k| {
                    let z = lo + k as f64 * dz;
                    let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                    w * dz * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() * f(z)
                })
                .sum()
        };
        let lik = |h: f64| -> f64 {
            let pot = model.crf.potentials(&model.params, &[vec![h]]).unwrap();
            log_likelihood(&ids, &pot).unwrap()
        };
        let log_p = grid(&|z| lik(mu + sd * z).exp()).ln();
        let expected_elbo = grid(&|z| model.elbo(&ids, &[vec![z]], KlEstimator::Analytic).unwrap().elbo);
        assert!(expected_elbo <= log_p, "{expected_elbo} > {log_p}");
        // sanity on the oracle itself
        let pot = model.crf.potentials(&model.params, &[vec![mu]]).unwrap();
        assert!(brute_force_log_z(&pot).is_ok());
    }

    #[test]
    fn analytic_kl_has_lower_variance_than_sampled_ratio() {
        let model = Model::new(tiny_config(), 6).unwrap();
        let ids = [3, 5, 4, EOS];
        let mut a = Vec::new();
        let mut s = Vec::new();
        for r in 0..1000 {
            let eps = model.draw_noise(4, &mut SeedStream::new(99).rng_at(r));
            a.push(model.elbo(&ids, &eps, KlEstimator::Analytic).unwrap().elbo);
            s.push(model.elbo(&ids, &eps, KlEstimator::Sampled).unwrap().elbo);
        }
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        assert!(var(&a) < var(&s), "{} vs {}", var(&a), var(&s));
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let config = TrainConfig {
            learning_rate: 0.0,
            ..tiny_config()
        };
        let mut model = Model::new(config, 6).unwrap();
        let before = model.params.clone();
        train(&mut model, &corpus(6), |_, _| Ok(())).unwrap();
        assert_eq!(model.params, before);
    }

    #[test]
    fn training_is_deterministic_and_batch_order_free_at_zero_lr() {
        let run = |config: TrainConfig| {
            let mut model = Model::new(config, 6).unwrap();
            let log = train(&mut model, &corpus(6), |_, _| Ok(())).unwrap();
            (log, model.params)
        };
        let (a, pa) = run(tiny_config());
        let (b, pb) = run(tiny_config());
        assert_eq!(pa, pb);
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!((x.elbo, x.recon, x.kl), (y.elbo, y.recon, y.kl));
        }
        let frozen = |batch_size| TrainConfig {
            learning_rate: 0.0,
            batch_size,
            ..tiny_config()
        };
        let (c, _) = run(frozen(1));
        let (d, _) = run(frozen(5));
        for (x, y) in c.rows.iter().zip(&d.rows) {
            assert!((x.elbo - y.elbo).abs() < 1e-12);
        }
    }

    #[test]
    fn log_csv_layout() {
        let mut model = Model::new(tiny_config(), 6).unwrap();
        let mut seen = 0;
        let log = train(&mut model, &corpus(6), |_, row| {
            seen += 1;
            assert_eq!(row.epoch, seen);
            Ok(())
        })
        .unwrap();
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,elbo,recon,kl,seconds");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,"));
        assert!(log.rows.iter().all(|r| r.recon <= 0.0 && r.kl >= 0.0));
    }

    #[test]
    fn generation_is_reproducible_and_stops_before_eos() {
        let model = Model::new(tiny_config(), 6).unwrap();
        let lengths = LengthSource::Fixed(6);
        for i in 0..50 {
            let a = model.generate_one(&lengths, 7, i).unwrap();
            assert_eq!(a, model.generate_one(&lengths, 7, i).unwrap());
            assert!(a.len() <= 6 && a.iter().all(|&w| w >= 2));
        }
        let vocab = Vocab::from_words(["a", "b", "c"]).unwrap();
        assert_eq!(vocab.decode(&[3, 4, EOS, 5]), vec!["a", "b"]);
    }
}
