use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Worst coordinate found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares tape gradients with central differences, coordinate by
/// coordinate.
///
/// `loss` builds the scalar root from the bound parameter handles. It must be
/// a deterministic function of the parameters: any sampling noise has to be
/// fixed by the caller before the check.
///
/// The relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(params: &ParamSet, eps: f64, loss: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let root = loss(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    drop(tape);

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let v = p.bind(&mut t);
        let r = loss(&mut t, &v)?;
        Ok(t.scalar_value(r))
    };

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        param: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = params.clone();
    for (slot, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var);
        for i in 0..params.get(slot).len() {
            let orig = params.get(slot).data()[i];
            probe.get_mut(slot).data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(slot).data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(slot).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > worst.max_rel_error || worst.param.is_empty() {
                worst = GradCheck {
                    max_rel_error: rel,
                    param: params.name(slot).to_string(),
                    index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}
