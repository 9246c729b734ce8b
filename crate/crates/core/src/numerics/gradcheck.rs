//! Central finite-difference oracle for the gradient tape.

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{ensure, Result};

/// A scalar expression that can be built at any precision.
///
/// Implementors are evaluated at `S` for the analytic gradient and at `f64`
/// for the finite-difference reference.
pub trait Objective {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[Var]) -> Result<Var>;
}

/// Evaluates `f` at `f64` with no gradient bookkeeping.
pub fn evaluate<F: Objective>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f.build(&mut g, &vars)?;
    g.value(out).item()
}

/// Maximum element-wise relative error between the analytic gradient
/// (computed at precision `S`) and central finite differences at `f64`.
///
/// The relative error uses `max(|a|, |b|, 1e-8)` as denominator.
pub fn check_gradients<S: Scalar, F: Objective>(
    f: &F,
    inputs: &[Tensor<f64>],
    fd_step: f64,
) -> Result<f64> {
    ensure!(
        fd_step > 0.0 && fd_step.is_finite(),
        "finite-difference step must be positive, got {fd_step}"
    );
    let mut g = Graph::<S>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.cast())).collect();
    let out = f.build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (slot, &var) in vars.iter().enumerate() {
        let analytic = grads.get_f64(var);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = inputs[slot].data()[i];
            probe[slot].data_mut()[i] = orig + fd_step;
            let up = evaluate(f, &probe)?;
            probe[slot].data_mut()[i] = orig - fd_step;
            let down = evaluate(f, &probe)?;
            probe[slot].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * fd_step);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
