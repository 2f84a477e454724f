use rand::Rng;

use super::array::{matvec, Array};
use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::Result;

/// One-hidden-layer tanh network `W₂ tanh(W₁x + b₁) + b₂`, stored as four
/// slots of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl Mlp {
    /// Registers `{prefix}.w1`, `.b1`, `.w2`, `.b2` with Glorot-uniform
    /// weights and zero biases. `output_gain` scales the output layer.
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        dims: (usize, usize, usize),
        output_gain: f64,
        rng: &mut R,
    ) -> Mlp {
        let (input, hidden, output) = dims;
        let bound1 = (6.0 / (input + hidden) as f64).sqrt();
        let bound2 = output_gain * (6.0 / (hidden + output) as f64).sqrt();
        let w1 = params.insert(format!("{prefix}.w1"), Array::uniform(&[hidden, input], bound1, rng));
        let b1 = params.insert(format!("{prefix}.b1"), Array::zeros(&[hidden]));
        let w2 = params.insert(format!("{prefix}.w2"), Array::uniform(&[output, hidden], bound2, rng));
        let b2 = params.insert(format!("{prefix}.b2"), Array::zeros(&[output]));
        Mlp {
            input,
            hidden,
            output,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// Looks the four tensors up by name in an existing set.
    pub fn locate(params: &ParamSet, prefix: &str) -> Result<Mlp> {
        let slot = |s: &str| {
            params
                .index_of(&format!("{prefix}.{s}"))
                .ok_or_else(|| crate::Error::Checkpoint(format!("missing tensor {prefix}.{s}")))
        };
        let (w1, b1, w2, b2) = (slot("w1")?, slot("b1")?, slot("w2")?, slot("b2")?);
        let (hidden, input) = (params.get(w1).shape()[0], params.get(w1).shape()[1]);
        let output = params.get(w2).shape()[0];
        Ok(Mlp {
            input,
            hidden,
            output,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn slots(&self) -> [usize; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let a = tape.matvec(vars[self.w1], x)?;
        let a = tape.add(a, vars[self.b1])?;
        let h = tape.tanh(a);
        let o = tape.matvec(vars[self.w2], h)?;
        tape.add(o, vars[self.b2])
    }

    pub fn forward_plain(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        let mut h = matvec(params.get(self.w1).data(), self.hidden, self.input, x);
        for (hi, bi) in h.iter_mut().zip(params.get(self.b1).data()) {
            *hi = (*hi + bi).tanh();
        }
        let mut o = matvec(params.get(self.w2).data(), self.output, self.hidden, &h);
        for (oi, bi) in o.iter_mut().zip(params.get(self.b2).data()) {
            *oi += bi;
        }
        o
    }

    /// Zeroes the output layer so the network maps every input to zero.
    pub fn zero_output(&self, params: &mut ParamSet) {
        params.get_mut(self.w2).data_mut().fill(0.0);
        params.get_mut(self.b2).data_mut().fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_and_plain_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let mlp = Mlp::register(&mut params, "net", (3, 5, 2), 1.0, &mut rng);
        params
            .get_mut(mlp.b1)
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3, 0.0, 0.05]);
        let x = [0.4, -1.1, 2.0];
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let xv = tape.constant(Array::vector(x.to_vec()));
        let y = mlp.forward(&mut tape, &vars, xv).unwrap();
        let plain = mlp.forward_plain(&params, &x);
        for (a, b) in tape.value(y).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(Mlp::locate(&params, "net").unwrap(), mlp);
    }
}
