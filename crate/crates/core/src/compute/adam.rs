use serde::{Deserialize, Serialize};

use super::array::Array;
use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam, minimizing.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Array>,
    second: Vec<Array>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        AdamState {
            config,
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Array] {
        &self.first
    }

    pub fn second_moment(&self) -> &[Array] {
        &self.second
    }

    /// One update `θ ← θ − lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for (slot, g) in grads.iter().enumerate() {
            if g.shape() != params.get(slot).shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: params.get(slot).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for (slot, g) in grads.iter().enumerate() {
            let m = self.first[slot].data_mut();
            let v = self.second[slot].data_mut();
            let theta = params.get_mut(slot).data_mut();
            for i in 0..g.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Array::vector(vec![value]));
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut params = ParamSet::new();
        params.insert("w", Array::vector(vec![0.5, -2.0, 3.0]));
        let g = Array::vector(vec![0.3, -7.0, 1e-3]);
        let mut state = AdamState::new(cfg, &params);
        state.step(&mut params, std::slice::from_ref(&g)).unwrap();
        for ((after, before), gi) in params.get(0).data().iter().zip([0.5, -2.0, 3.0]).zip(g.data()) {
            let delta = after - before;
            // slack for the rounding of `after - before`
            let tol = cfg.lr * cfg.eps / gi.abs() + 1e-14;
            assert!((delta + cfg.lr * gi.signum()).abs() <= tol, "delta {delta}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut params = single(1.25);
        let mut state = AdamState::new(AdamConfig::default(), &params);
        state.step(&mut params, &[Array::vector(vec![0.0])]).unwrap();
        assert_eq!(params.get(0).data(), &[1.25]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn two_steps_match_hand_unrolled_recurrence() {
        // Hand-unrolled with g = 1, lr = 0.1, β1 = 0.9, β2 = 0.999, ε = 1e-8.
        // step 1: m = 0.1, v = 0.001, m̂ = 1, v̂ = 1 → θ -= 0.1 / (1 + 1e-8)
        // step 2: m = 0.19, v = 0.001999, m̂ = 0.19/0.19 = 1, v̂ = 0.001999/0.001999 = 1
        let expect = 0.0 - 2.0 * 0.1 / (1.0 + 1e-8);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut params = single(0.0);
        let mut state = AdamState::new(cfg, &params);
        for _ in 0..2 {
            state.step(&mut params, &[Array::vector(vec![1.0])]).unwrap();
        }
        assert!((params.get(0).data()[0] - expect).abs() < 1e-15);
        assert!((state.first_moment()[0].data()[0] - 0.19).abs() < 1e-15);
        assert!((state.second_moment()[0].data()[0] - 0.001999).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let mut params = single(-0.75);
        let before = params.clone();
        let mut state = AdamState::new(cfg, &params);
        for g in [3.0, -1.0, 1e-9] {
            state.step(&mut params, &[Array::vector(vec![g])]).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = single(0.0);
        let mut state = AdamState::new(AdamConfig::default(), &params);
        let err = state.step(&mut params, &[Array::vector(vec![1.0, 2.0])]);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }
}
