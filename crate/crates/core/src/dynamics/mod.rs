//! Latent chain: Gaussian prior transitions, a right-to-left inference
//! network, reparametrized sampling, and diagonal Gaussian KL.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compute::{matvec, sigmoid, Array, Mlp, ParamSet, Tape, Var};
use crate::error::{Error, Result};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynConfig {
    pub vocab_size: usize,
    /// Latent state dimension d′.
    pub state_dim: usize,
    /// Hidden width of the transition and posterior networks.
    pub hidden: usize,
    /// Width of the suffix encoder state.
    pub enc_dim: usize,
    /// Encoder word-embedding width.
    pub emb_dim: usize,
}

/// Diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl Gaussian {
    pub fn standard(dim: usize) -> Gaussian {
        Gaussian {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    fn from_output(out: &[f64]) -> Gaussian {
        let d = out.len() / 2;
        Gaussian {
            mean: out[..d].to_vec(),
            log_var: out[d..].iter().map(|x| x.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect(),
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(x)
            .map(|((m, lv), xi)| -0.5 * (ln2pi + lv + (xi - m).powi(2) / lv.exp()))
            .sum()
    }
}

/// `mean + exp(log_var / 2) ⊙ ε`.
pub fn reparam_sample(g: &Gaussian, eps: &[f64]) -> Vec<f64> {
    g.mean
        .iter()
        .zip(&g.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// `KL(q ‖ p)` for diagonal Gaussians.
pub fn gaussian_kl(q: &Gaussian, p: &Gaussian) -> f64 {
    let mut kl = 0.0;
    for i in 0..q.mean.len() {
        let (mq, lq, mp, lp) = (q.mean[i], q.log_var[i], p.mean[i], p.log_var[i]);
        kl += lp - lq + ((lq - lp).exp() + (mq - mp).powi(2) * (-lp).exp()) - 1.0;
    }
    0.5 * kl
}

pub fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Gaussian parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeGaussian {
    pub mean: Var,
    pub log_var: Var,
}

pub fn reparam_on_tape(tape: &mut Tape, g: TapeGaussian, eps: &[f64]) -> Result<Var> {
    let half = tape.scale(g.log_var, 0.5);
    let sd = tape.exp(half);
    let e = tape.constant(Array::vector(eps.to_vec()));
    let noise = tape.mul(sd, e)?;
    tape.add(g.mean, noise)
}

pub fn kl_on_tape(tape: &mut Tape, q: TapeGaussian, p: TapeGaussian) -> Result<Var> {
    let dim = tape.value(q.mean).len() as f64;
    let a = tape.sub(q.log_var, p.log_var)?;
    let ratio = tape.exp(a);
    let dm = tape.sub(q.mean, p.mean)?;
    let dm2 = tape.square(dm);
    let neg = tape.neg(p.log_var);
    let prec = tape.exp(neg);
    let quad = tape.mul(dm2, prec)?;
    let s = tape.add(ratio, quad)?;
    let s = tape.sub(s, a)?;
    let total = tape.sum(s);
    let total = tape.add_const(total, -dim);
    Ok(tape.scale(total, 0.5))
}

/// Gate weights of one GRU gate: input, recurrent, bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Gate {
    w: usize,
    u: usize,
    b: usize,
}

/// Slots of the latent-chain networks inside a model-wide [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dynamics {
    pub config: DynConfig,
    pub trans: Mlp,
    pub post: Mlp,
    pub emb: usize,
    update: Gate,
    reset: Gate,
    cand: Gate,
}

impl Dynamics {
    pub fn register<R: Rng + ?Sized>(params: &mut ParamSet, config: DynConfig, rng: &mut R) -> Result<Dynamics> {
        let c = &config;
        if c.vocab_size < 2 || c.state_dim == 0 || c.hidden == 0 || c.enc_dim == 0 || c.emb_dim == 0 {
            return Err(Error::InvalidConfig("latent-chain dimensions must be positive".into()));
        }
        let dp = c.state_dim;
        let trans = Mlp::register(params, "dyn.trans", (dp, c.hidden, 2 * dp), 0.5, rng);
        let post = Mlp::register(params, "dyn.post", (dp + c.enc_dim, c.hidden, 2 * dp), 0.5, rng);
        let emb = params.insert("dyn.emb", Array::randn(&[c.emb_dim, c.vocab_size], 0.3, rng));
        let (e, h) = (c.emb_dim, c.enc_dim);
        let bw = (6.0 / (e + h) as f64).sqrt();
        let bu = (3.0 / h as f64).sqrt();
        let mut gate = |name: &str| Gate {
            w: params.insert(format!("dyn.enc.w{name}"), Array::uniform(&[h, e], bw, rng)),
            u: params.insert(format!("dyn.enc.u{name}"), Array::uniform(&[h, h], bu, rng)),
            b: params.insert(format!("dyn.enc.b{name}"), Array::zeros(&[h])),
        };
        let (update, reset, cand) = (gate("z"), gate("r"), gate("h"));
        Ok(Dynamics {
            config,
            trans,
            post,
            emb,
            update,
            reset,
            cand,
        })
    }

    pub fn locate(params: &ParamSet, config: DynConfig) -> Result<Dynamics> {
        let slot = |n: String| {
            params
                .index_of(&n)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {n}")))
        };
        let gate = |name: &str| -> Result<Gate> {
            Ok(Gate {
                w: slot(format!("dyn.enc.w{name}"))?,
                u: slot(format!("dyn.enc.u{name}"))?,
                b: slot(format!("dyn.enc.b{name}"))?,
            })
        };
        let dynamics = Dynamics {
            trans: Mlp::locate(params, "dyn.trans")?,
            post: Mlp::locate(params, "dyn.post")?,
            emb: slot("dyn.emb".into())?,
            update: gate("z")?,
            reset: gate("r")?,
            cand: gate("h")?,
            config,
        };
        if params.get(dynamics.emb).shape() != [dynamics.config.emb_dim, dynamics.config.vocab_size]
            || dynamics.trans.input != dynamics.config.state_dim
        {
            return Err(Error::Checkpoint(
                "latent-chain tensor shapes disagree with the configuration".into(),
            ));
        }
        Ok(dynamics)
    }

    /// `p(h_t | h_{t-1})`; `p(h₁)` uses `h_prev = 0`.
    pub fn prior_step(&self, params: &ParamSet, h_prev: &[f64]) -> Gaussian {
        Gaussian::from_output(&self.trans.forward_plain(params, h_prev))
    }

    /// `q(h_t | h_{t-1}, e_t)`.
    pub fn posterior_step(&self, params: &ParamSet, h_prev: &[f64], e: &[f64]) -> Gaussian {
        let input: Vec<f64> = h_prev.iter().chain(e).copied().collect();
        Gaussian::from_output(&self.post.forward_plain(params, &input))
    }

    /// Draws `h_{1:T}` from the prior.
    pub fn prior_sample<R: Rng + ?Sized>(&self, params: &ParamSet, t_len: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let mut h = vec![0.0; self.config.state_dim];
        let mut path = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            let g = self.prior_step(params, &h);
            let eps = standard_normal(self.config.state_dim, rng);
            h = reparam_sample(&g, &eps);
            path.push(h.clone());
        }
        path
    }

    fn gru_plain(&self, params: &ParamSet, x: &[f64], e: &[f64]) -> Vec<f64> {
        let (hd, ed) = (self.config.enc_dim, self.config.emb_dim);
        let affine = |g: Gate, inp: &[f64], rec: &[f64]| -> Vec<f64> {
            let a = matvec(params.get(g.w).data(), hd, ed, inp);
            let b = matvec(params.get(g.u).data(), hd, hd, rec);
            a.iter()
                .zip(&b)
                .zip(params.get(g.b).data())
                .map(|((x, y), z)| x + y + z)
                .collect()
        };
        let z: Vec<f64> = affine(self.update, x, e).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = affine(self.reset, x, e).into_iter().map(sigmoid).collect();
        let re: Vec<f64> = r.iter().zip(e).map(|(a, b)| a * b).collect();
        let n: Vec<f64> = affine(self.cand, x, &re).into_iter().map(f64::tanh).collect();
        (0..hd).map(|i| (1.0 - z[i]) * n[i] + z[i] * e[i]).collect()
    }

    /// Suffix codes `e_1..e_T`, computed right to left from `e_{T+1} = 0`.
    pub fn encode_suffix(&self, params: &ParamSet, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_ids(ids)?;
        let emb = params.get(self.emb);
        let mut e = vec![0.0; self.config.enc_dim];
        let mut out = vec![Vec::new(); ids.len()];
        for (t, &w) in ids.iter().enumerate().rev() {
            e = self.gru_plain(params, &emb.column(w), &e);
            out[t] = e.clone();
        }
        Ok(out)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&w| w >= self.config.vocab_size) {
            Some(&w) => Err(Error::OutOfVocabulary {
                id: w,
                size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn split_on_tape(tape: &mut Tape, out: Var, dim: usize) -> Result<TapeGaussian> {
        let mean = tape.slice(out, 0, dim)?;
        let raw = tape.slice(out, dim, dim)?;
        let log_var = tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok(TapeGaussian { mean, log_var })
    }

    pub fn prior_on_tape(&self, tape: &mut Tape, vars: &[Var], h_prev: Var) -> Result<TapeGaussian> {
        let out = self.trans.forward(tape, vars, h_prev)?;
        Self::split_on_tape(tape, out, self.config.state_dim)
    }

    pub fn posterior_on_tape(&self, tape: &mut Tape, vars: &[Var], h_prev: Var, e: Var) -> Result<TapeGaussian> {
        let input = tape.concat(&[h_prev, e])?;
        let out = self.post.forward(tape, vars, input)?;
        Self::split_on_tape(tape, out, self.config.state_dim)
    }

    fn gate_on_tape(&self, tape: &mut Tape, vars: &[Var], g: Gate, x: Var, e: Var) -> Result<Var> {
        let a = tape.matvec(vars[g.w], x)?;
        let b = tape.matvec(vars[g.u], e)?;
        let s = tape.add(a, b)?;
        tape.add(s, vars[g.b])
    }

    pub fn encode_suffix_on_tape(&self, tape: &mut Tape, vars: &[Var], ids: &[usize]) -> Result<Vec<Var>> {
        self.check_ids(ids)?;
        let mut e = tape.constant(Array::zeros(&[self.config.enc_dim]));
        let mut out = vec![e; ids.len()];
        for (t, &w) in ids.iter().enumerate().rev() {
            let x = tape.column(vars[self.emb], w)?;
            let z = self.gate_on_tape(tape, vars, self.update, x, e)?;
            let z = tape.sigmoid(z);
            let r = self.gate_on_tape(tape, vars, self.reset, x, e)?;
            let r = tape.sigmoid(r);
            let re = tape.mul(r, e)?;
            let n = self.gate_on_tape(tape, vars, self.cand, x, re)?;
            let n = tape.tanh(n);
            // (1 - z) ⊙ n + z ⊙ e = n + z ⊙ (e - n)
            let diff = tape.sub(e, n)?;
            let gated = tape.mul(z, diff)?;
            e = tape.add(n, gated)?;
            out[t] = e;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamSet, Dynamics) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let cfg = DynConfig {
            vocab_size: 7,
            state_dim: 3,
            hidden: 5,
            enc_dim: 4,
            emb_dim: 3,
        };
        let dynamics = Dynamics::register(&mut params, cfg, &mut rng).unwrap();
        // non-zero biases so the checks do not sit on symmetric points
        for i in 0..params.len() {
            if params.name(i).contains(".b") {
                let shape = params.get(i).shape().to_vec();
                *params.get_mut(i) = Array::randn(&shape, 0.2, &mut rng);
            }
        }
        (params, dynamics)
    }

    #[test]
    fn zero_output_layer_gives_unit_gaussian() {
        let (mut params, dynamics) = setup(1);
        dynamics.trans.zero_output(&mut params);
        for h in [[0.0, 0.0, 0.0], [1.0, -2.0, 3.0]] {
            assert_eq!(dynamics.prior_step(&params, &h), Gaussian::standard(3));
        }
    }

    #[test]
    fn plain_and_tape_networks_agree() {
        let (params, dynamics) = setup(2);
        let ids = [3, 5, 4, 1];
        let plain = dynamics.encode_suffix(&params, &ids).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let codes = dynamics.encode_suffix_on_tape(&mut tape, &vars, &ids).unwrap();
        for (p, v) in plain.iter().zip(&codes) {
            for (a, b) in p.iter().zip(tape.value(*v).data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let h = [0.2, -0.1, 0.5];
        let hv = tape.constant(Array::vector(h.to_vec()));
        let q = dynamics.posterior_on_tape(&mut tape, &vars, hv, codes[1]).unwrap();
        let qp = dynamics.posterior_step(&params, &h, &plain[1]);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-13);
        assert!(close(tape.value(q.mean).data(), &qp.mean));
        assert!(close(tape.value(q.log_var).data(), &qp.log_var));
        let p = dynamics.prior_on_tape(&mut tape, &vars, hv).unwrap();
        let pp = dynamics.prior_step(&params, &h);
        assert!(close(tape.value(p.mean).data(), &pp.mean));
        let kl = kl_on_tape(&mut tape, q, p).unwrap();
        assert!((tape.scalar_value(kl) - gaussian_kl(&qp, &pp)).abs() < 1e-12);
    }

    #[test]
    fn suffix_codes_ignore_the_prefix() {
        let (params, dynamics) = setup(3);
        let a = dynamics.encode_suffix(&params, &[3, 5, 4, 1]).unwrap();
        let b = dynamics.encode_suffix(&params, &[6, 5, 4, 1]).unwrap();
        assert_ne!(a[0], b[0]);
        assert_eq!(a[1..], b[1..]);
        let c = dynamics.encode_suffix(&params, &[3, 5, 4, 6]).unwrap();
        for t in 0..4 {
            assert_ne!(a[t], c[t]);
        }
    }

    #[test]
    fn prior_and_posterior_gradients() {
        let (params, dynamics) = setup(4);
        let report = grad_check(&params, 1e-4, |tape, vars| {
            let h = tape.constant(Array::vector(vec![0.3, -0.7, 0.1]));
            let p = dynamics.prior_on_tape(tape, vars, h)?;
            let codes = dynamics.encode_suffix_on_tape(tape, vars, &[4, 3, 1])?;
            let q = dynamics.posterior_on_tape(tape, vars, h, codes[0])?;
            let x = reparam_on_tape(tape, q, &[0.5, -1.0, 0.25])?;
            let kl = kl_on_tape(tape, q, p)?;
            let sx = tape.sum(x);
            tape.add(kl, sx)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn reparam_identities() {
        let g = Gaussian {
            mean: vec![1.0, -2.0],
            log_var: vec![0.0, 0.0],
        };
        assert_eq!(reparam_sample(&g, &[0.0, 0.0]), g.mean);
        assert_eq!(reparam_sample(&g, &[0.5, 1.5]), vec![1.5, -0.5]);
    }

    #[test]
    fn kl_closed_form_values() {
        let q = Gaussian {
            mean: vec![1.0],
            log_var: vec![0.0],
        };
        assert!((gaussian_kl(&q, &Gaussian::standard(1)) - 0.5).abs() < 1e-15);
        assert!(gaussian_kl(&q, &q).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let q = Gaussian {
            mean: vec![0.4, -0.3],
            log_var: vec![-0.5, 0.3],
        };
        let p = Gaussian {
            mean: vec![0.0, 0.2],
            log_var: vec![0.2, -0.4],
        };
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = reparam_sample(&q, &standard_normal(2, &mut rng));
            let r = q.log_density(&x) - p.log_density(&x);
            s += r;
            s2 += r * r;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = gaussian_kl(&q, &p);
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn prior_sampling() {
        let (mut params, dynamics) = setup(5);
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            dynamics.prior_sample(&params, 4, &mut a),
            dynamics.prior_sample(&params, 4, &mut b)
        );

        // unit Gaussian: first-state mean near zero
        dynamics.trans.zero_output(&mut params);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sum = [0.0; 3];
        for _ in 0..n {
            let h = dynamics.prior_sample(&params, 1, &mut rng);
            for i in 0..3 {
                sum[i] += h[0][i];
            }
        }
        for s in sum {
            assert!((s / n as f64).abs() < 3.0 / (n as f64).sqrt());
        }

        // variance pinned to the floor: trajectory follows the means
        let b2 = dynamics.trans.slots()[3];
        params.get_mut(b2).data_mut()[3..].fill(-1e3);
        params.get_mut(b2).data_mut()[..3].copy_from_slice(&[0.5, -0.5, 1.0]);
        let path = dynamics.prior_sample(&params, 3, &mut rng);
        for h in path {
            for (x, m) in h.iter().zip([0.5, -0.5, 1.0]) {
                assert!((x - m).abs() < 0.05);
            }
        }
    }
}
