//! Central-difference gradient oracle.
//!
//! Runs in `f64` and compares the tape's analytic gradient against
//! `(f(x + eps) - f(x - eps)) / 2eps` for every input coordinate.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - fd| / max(1, |analytic|)` for a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), core::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::Contract(format!("eps must lie in [1e-4, 1e-2], got {eps}")));
    }
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| alloc::vec![0.0; t.numel()])
            })
            .collect()
    };

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(out.with_value(|v| v.data()[0]))
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let err = (grad[j] - fd).abs() / grad[j].abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("gradient check of input {i}[{j}]")));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
