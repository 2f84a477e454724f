//! Inference on a fixed chain of potentials.
//!
//! Everything here works on [`ChainPotentials`]: per-step unary
//! log-potentials and per-step pairwise operators for one latent
//! trajectory. The `BOS` id is the fixed left boundary `w₀`; it is never part
//! of the emittable support.

use std::sync::Arc;

use rand::Rng;

use crate::compute::{logsumexp, matvec, matvec_t, Array};
use crate::corpus::BOS;
use crate::error::{Error, Result};

/// Context-dependent interaction matrix `S(h_{t-1}, h_t)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Interaction {
    /// Entries of a diagonal `d × d` matrix.
    Diagonal(Vec<f64>),
    /// Dense `d × d` matrix.
    Full(Array),
}

impl Interaction {
    fn apply(&self, a: &[f64]) -> Vec<f64> {
        match self {
            Interaction::Diagonal(s) => s.iter().zip(a).map(|(x, y)| x * y).collect(),
            Interaction::Full(m) => matvec(m.data(), m.rows(), m.cols(), a),
        }
    }

    fn apply_t(&self, a: &[f64]) -> Vec<f64> {
        match self {
            Interaction::Diagonal(s) => s.iter().zip(a).map(|(x, y)| x * y).collect(),
            Interaction::Full(m) => matvec_t(m.data(), m.rows(), m.cols(), a),
        }
    }
}

/// The pairwise potential matrix `T = X⁺ᵀ S Y⁺` in factored form.
///
/// `T[a, b] = exp ψ(a, b)` is never materialized; applying it to a vector
/// costs O(d·|V|).
#[derive(Clone, Debug)]
pub struct PairwiseOperator {
    left: Arc<Array>,
    right: Arc<Array>,
    interaction: Interaction,
}

impl PairwiseOperator {
    /// `left` and `right` are the positive `d × |V|` factors.
    pub fn new(left: Arc<Array>, right: Arc<Array>, interaction: Interaction) -> Result<Self> {
        let d = left.rows();
        if right.shape() != left.shape() {
            return Err(Error::ShapeMismatch {
                op: "pairwise_operator",
                left: left.shape().to_vec(),
                right: right.shape().to_vec(),
            });
        }
        let ok = match &interaction {
            Interaction::Diagonal(s) => s.len() == d,
            Interaction::Full(m) => m.shape() == [d, d],
        };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "pairwise_operator",
                left: vec![d, d],
                right: match &interaction {
                    Interaction::Diagonal(s) => vec![s.len()],
                    Interaction::Full(m) => m.shape().to_vec(),
                },
            });
        }
        Ok(PairwiseOperator {
            left,
            right,
            interaction,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.left.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.left.rows()
    }

    pub fn left(&self) -> &Array {
        &self.left
    }

    pub fn right(&self) -> &Array {
        &self.right
    }

    pub fn interaction(&self) -> &Interaction {
        &self.interaction
    }

    /// `T · v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let (d, n) = (self.left.rows(), self.left.cols());
        let a = matvec(self.right.data(), d, n, v);
        let b = self.interaction.apply(&a);
        matvec_t(self.left.data(), d, n, &b)
    }

    /// Row `T[a, ·]`.
    pub fn row(&self, a: usize) -> Vec<f64> {
        let (d, n) = (self.left.rows(), self.left.cols());
        let x = self.left.column(a);
        let b = self.interaction.apply_t(&x);
        matvec_t(self.right.data(), d, n, &b)
    }

    /// Single entry `T[a, b]`, computed directly from the factors.
    pub fn entry(&self, a: usize, b: usize) -> f64 {
        let x = self.left.column(a);
        let y = self.right.column(b);
        let sy = self.interaction.apply(&y);
        x.iter().zip(&sy).map(|(p, q)| p * q).sum()
    }

    /// Dense `|V| × |V|` matrix. Test and diagnostic use only.
    pub fn materialize(&self) -> Array {
        let n = self.vocab_size();
        let mut data = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                data.push(self.entry(a, b));
            }
        }
        Array::matrix(n, n, data).expect("square shape")
    }
}

/// Pairwise term of one step.
#[derive(Clone, Debug)]
pub enum StepOperator {
    Factored(PairwiseOperator),
    /// The all-ones matrix: no interaction between neighbouring words.
    Ones(usize),
}

impl StepOperator {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            StepOperator::Factored(op) => op.apply(v),
            StepOperator::Ones(n) => vec![v.iter().sum(); *n],
        }
    }

    pub fn row(&self, a: usize) -> Vec<f64> {
        match self {
            StepOperator::Factored(op) => op.row(a),
            StepOperator::Ones(n) => vec![1.0; *n],
        }
    }

    pub fn entry(&self, a: usize, b: usize) -> f64 {
        match self {
            StepOperator::Factored(op) => op.entry(a, b),
            StepOperator::Ones(_) => 1.0,
        }
    }
}

/// Unary log-potentials and pairwise operators for steps `1..=T`.
#[derive(Clone, Debug)]
pub struct ChainPotentials {
    vocab_size: usize,
    unary: Vec<Vec<f64>>,
    steps: Vec<StepOperator>,
}

impl ChainPotentials {
    pub fn new(unary: Vec<Vec<f64>>, steps: Vec<StepOperator>) -> Result<Self> {
        let Some(first) = unary.first() else {
            return Err(Error::InvalidSequence("chain needs at least one step".into()));
        };
        let vocab_size = first.len();
        if vocab_size < 2 {
            return Err(Error::InvalidArray(
                "vocabulary must hold BOS and at least one word".into(),
            ));
        }
        if steps.len() != unary.len() {
            return Err(Error::ShapeMismatch {
                op: "chain_potentials",
                left: vec![unary.len()],
                right: vec![steps.len()],
            });
        }
        for (u, s) in unary.iter().zip(&steps) {
            let n = match s {
                StepOperator::Factored(op) => op.vocab_size(),
                StepOperator::Ones(n) => *n,
            };
            if u.len() != vocab_size || n != vocab_size {
                return Err(Error::ShapeMismatch {
                    op: "chain_potentials",
                    left: vec![vocab_size],
                    right: vec![u.len(), n],
                });
            }
        }
        Ok(ChainPotentials {
            vocab_size,
            unary,
            steps,
        })
    }

    /// Chain length T.
    pub fn len(&self) -> usize {
        self.unary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unary.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Number of emittable words (`|V| - 1`).
    pub fn support_size(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn unary(&self, t: usize) -> &[f64] {
        &self.unary[t - 1]
    }

    pub fn unary_mut(&mut self, t: usize) -> &mut Vec<f64> {
        &mut self.unary[t - 1]
    }

    pub fn step(&self, t: usize) -> &StepOperator {
        &self.steps[t - 1]
    }

    /// Log pairwise potential `ψ(a, b)` at step `t`.
    pub fn log_pairwise(&self, t: usize, a: usize, b: usize) -> f64 {
        self.steps[t - 1].entry(a, b).ln()
    }
}

/// Scaled backward messages.
///
/// `beta[t-1]` holds `β̃_t` for `t = 1..=T+1`, each normalized to sum 1; the
/// unscaled message is `β_t = β̃_t · exp(Σ_{k ≥ t} c_k)` with `c = log_scale`.
/// The partition function is `log Z = Σ_t c_t + log β̃_1(BOS)`.
#[derive(Clone, Debug)]
pub struct BackwardPass {
    pub beta: Vec<Vec<f64>>,
    pub log_scale: Vec<f64>,
    /// Per-step maximum unary log-potential subtracted before exponentiation.
    pub shift: Vec<f64>,
    /// Per-step sum of the unnormalized message, so `c_t = ln norm_t + shift_t`.
    pub norm: Vec<f64>,
    pub log_z: f64,
}

impl BackwardPass {
    /// `log β_t(w)` (unscaled).
    pub fn log_beta(&self, t: usize, w: usize) -> f64 {
        let tail: f64 = self.log_scale[t - 1..].iter().sum();
        self.beta[t - 1][w].ln() + tail
    }
}

/// `exp(u - shift)` over the support, zero at `BOS`.
fn shifted_exp(u: &[f64]) -> (Vec<f64>, f64) {
    let shift = u
        .iter()
        .enumerate()
        .filter(|&(w, _)| w != BOS)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let o = u
        .iter()
        .enumerate()
        .map(|(w, &x)| if w == BOS { 0.0 } else { (x - shift).exp() })
        .collect();
    (o, shift)
}

/// Backward recursion `β_t = T_t (o_t ⊙ β_{t+1})` with per-step
/// renormalization; O(d·|V|·T).
pub fn backward_pass(pot: &ChainPotentials) -> Result<BackwardPass> {
    let n = pot.vocab_size();
    let t_len = pot.len();
    let mut beta = vec![Vec::new(); t_len + 1];
    let mut log_scale = vec![0.0; t_len + 1];
    let mut shift = vec![0.0; t_len];
    let mut norm = vec![0.0; t_len];

    beta[t_len] = vec![1.0 / n as f64; n];
    log_scale[t_len] = (n as f64).ln();

    for i in (0..t_len).rev() {
        let (o, m) = shifted_exp(&pot.unary[i]);
        if !m.is_finite() {
            return Err(Error::NumericOverflow { step: i + 1 });
        }
        let v: Vec<f64> = o.iter().zip(&beta[i + 1]).map(|(a, b)| a * b).collect();
        let raw = pot.steps[i].apply(&v);
        let total: f64 = raw.iter().sum();
        if !(total > 0.0 && total.is_finite()) || raw.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericOverflow { step: i + 1 });
        }
        beta[i] = raw.iter().map(|x| x / total).collect();
        log_scale[i] = total.ln() + m;
        shift[i] = m;
        norm[i] = total;
    }

    let log_z = beta[0][BOS].ln() + log_scale.iter().sum::<f64>();
    if !log_z.is_finite() {
        return Err(Error::NumericOverflow { step: 1 });
    }
    Ok(BackwardPass {
        beta,
        log_scale,
        shift,
        norm,
        log_z,
    })
}

/// `S(w; h) = Σ_t ψ(w_t) + ψ(w_{t-1}, w_t)` with `w₀ = BOS`.
pub fn sequence_logscore(seq: &[usize], pot: &ChainPotentials) -> Result<f64> {
    if seq.len() != pot.len() {
        return Err(Error::InvalidSequence(format!(
            "sequence of length {} scored against a chain of length {}",
            seq.len(),
            pot.len()
        )));
    }
    let n = pot.vocab_size();
    let mut prev = BOS;
    let mut score = 0.0;
    for (i, &w) in seq.iter().enumerate() {
        if w >= n {
            return Err(Error::OutOfVocabulary { id: w, size: n });
        }
        if w == BOS {
            return Err(Error::InvalidSequence("BOS cannot be emitted".into()));
        }
        score += pot.unary[i][w] + pot.steps[i].entry(prev, w).ln();
        prev = w;
    }
    Ok(score)
}

pub fn log_likelihood(seq: &[usize], pot: &ChainPotentials) -> Result<f64> {
    let bp = backward_pass(pot)?;
    Ok(sequence_logscore(seq, pot)? - bp.log_z)
}

/// `p(w_t = · | w_{1:t-1}, h)` for `t` in `1..=T`; only the previous word
/// matters. The returned vector is zero at `BOS`.
pub fn conditional_factor(t: usize, w_prev: usize, bp: &BackwardPass, pot: &ChainPotentials) -> Result<Vec<f64>> {
    if t == 0 || t > pot.len() {
        return Err(Error::InvalidSequence(format!("step {t} outside 1..={}", pot.len())));
    }
    if w_prev >= pot.vocab_size() {
        return Err(Error::OutOfVocabulary {
            id: w_prev,
            size: pot.vocab_size(),
        });
    }
    let i = t - 1;
    let denom = bp.beta[i][w_prev];
    if denom.is_nan() || denom <= 0.0 {
        return Err(Error::UnreachablePrefix { step: t, word: w_prev });
    }
    // p(v) = T[a, v] e^{ψ(v)} β_{t+1}(v) / β_t(a), in scaled form.
    let row = pot.steps[i].row(w_prev);
    let scale = 1.0 / (denom * bp.norm[i]);
    let m = bp.shift[i];
    let next = &bp.beta[i + 1];
    Ok(pot.unary[i]
        .iter()
        .enumerate()
        .map(|(v, &u)| {
            if v == BOS {
                0.0
            } else {
                row[v] * (u - m).exp() * next[v] * scale
            }
        })
        .collect())
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws `w_1..w_T` left to right from the exact conditionals.
pub fn ancestral_sample<R: Rng + ?Sized>(pot: &ChainPotentials, rng: &mut R) -> Result<Vec<usize>> {
    let bp = backward_pass(pot)?;
    sample_with(pot, &bp, rng)
}

pub fn sample_with<R: Rng + ?Sized>(pot: &ChainPotentials, bp: &BackwardPass, rng: &mut R) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(pot.len());
    let mut prev = BOS;
    for t in 1..=pot.len() {
        let p = conditional_factor(t, prev, bp, pot)?;
        prev = draw(&p, rng);
        out.push(prev);
    }
    Ok(out)
}

/// Largest vocabulary for which dense marginal tables are built.
pub const DENSE_LIMIT: usize = 64;

/// Pairwise marginals `P(w_{t-1} = a, w_t = b | h)` for `t = 1..=T` as
/// `|V| × |V|` tables (the `t = 1` table has mass only in the `BOS` row).
pub fn pairwise_marginals(pot: &ChainPotentials, bp: &BackwardPass) -> Result<Vec<Array>> {
    let n = pot.vocab_size();
    if n > DENSE_LIMIT {
        return Err(Error::DiagnosticOnly {
            size: n,
            limit: DENSE_LIMIT,
        });
    }
    let t_len = pot.len();
    let log_t = |t: usize| -> Vec<f64> {
        let mut m = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                m.push(pot.log_pairwise(t, a, b));
            }
        }
        m
    };
    // log β_{t+1}(b) for t = 1..=T
    let log_beta_next: Vec<Vec<f64>> = (1..=t_len)
        .map(|t| (0..n).map(|b| bp.log_beta(t + 1, b)).collect())
        .collect();

    let mut tables = Vec::with_capacity(t_len);
    // log α_{t-1}(a): forward messages over the previous word.
    let mut log_alpha: Vec<f64> = (0..n).map(|a| if a == BOS { 0.0 } else { f64::NEG_INFINITY }).collect();
    for t in 1..=t_len {
        let lt = log_t(t);
        let u = pot.unary(t);
        let mut table = vec![0.0; n * n];
        for a in 0..n {
            if log_alpha[a] == f64::NEG_INFINITY {
                continue;
            }
            for b in 0..n {
                if b == BOS {
                    continue;
                }
                let lp = log_alpha[a] + lt[a * n + b] + u[b] + log_beta_next[t - 1][b] - bp.log_z;
                table[a * n + b] = lp.exp();
            }
        }
        let mut next = vec![f64::NEG_INFINITY; n];
        for b in 0..n {
            if b == BOS {
                continue;
            }
            let terms: Vec<f64> = (0..n).map(|a| log_alpha[a] + lt[a * n + b]).collect();
            next[b] = logsumexp(&terms)? + u[b];
        }
        log_alpha = next;
        tables.push(Array::matrix(n, n, table)?);
    }
    Ok(tables)
}

/// Per-step unary marginals `P(w_t = v | h)`: column sums of the pairwise
/// tables.
pub fn unary_marginals(tables: &[Array]) -> Vec<Vec<f64>> {
    tables
        .iter()
        .map(|m| {
            let n = m.cols();
            (0..n).map(|b| (0..m.rows()).map(|a| m.get2(a, b)).sum()).collect()
        })
        .collect()
}

/// Largest number of sequences the enumeration oracles will visit.
pub const ENUMERATION_LIMIT: f64 = 1e6;

/// Every emittable sequence of length T with its energy `S(w; h)`.
pub fn enumerate_scores(pot: &ChainPotentials) -> Result<Vec<(Vec<usize>, f64)>> {
    let k = pot.support_size();
    let t_len = pot.len();
    let count = (k as f64).powi(t_len as i32);
    if count > ENUMERATION_LIMIT {
        return Err(Error::InstanceTooLarge(count));
    }
    let support: Vec<usize> = (0..pot.vocab_size()).filter(|&w| w != BOS).collect();
    let mut out = Vec::with_capacity(count as usize);
    let mut digits = vec![0usize; t_len];
    loop {
        let seq: Vec<usize> = digits.iter().map(|&d| support[d]).collect();
        let s = sequence_logscore(&seq, pot)?;
        out.push((seq, s));
        let mut pos = t_len;
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < k {
                break;
            }
            digits[pos] = 0;
        }
    }
}

/// `log Σ_w exp S(w; h)` by explicit enumeration.
pub fn brute_force_log_z(pot: &ChainPotentials) -> Result<f64> {
    let scores: Vec<f64> = enumerate_scores(pot)?.into_iter().map(|(_, s)| s).collect();
    logsumexp(&scores)
}
