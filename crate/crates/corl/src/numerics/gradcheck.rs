//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Maximum relative error per parameter, in input order.
    pub max_rel_errors: Vec<f64>,
    pub pass: bool,
    pub tolerance: f64,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compare the tape gradient of a scalar function against central
/// differences `(f(x+h) - f(x-h)) / 2h`, element by element.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`. The function is
/// re-evaluated on a fresh tape for every probe, so any internal selections
/// (argmin/argmax) are recomputed; callers should probe away from ties.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    assert!(step > 0.0, "grad_check: step must be positive");

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = tensors.iter().map(|t| tape.var(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.scalar();
        if !v.is_finite() {
            return Err(Error::Numerical(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    // Analytic gradients from one reverse pass.
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let base = out.scalar();
    if !base.is_finite() {
        return Err(Error::Numerical(format!("objective evaluated to {base}")));
    }
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let mut max_rel_errors = Vec::with_capacity(params.len());
    for (pi, param) in params.iter().enumerate() {
        let mut worst = 0.0f64;
        for flat in 0..param.len() {
            let x = param.data()[flat];
            let mut plus = params.to_vec();
            plus[pi] = param.with_element(flat, x + step);
            let mut minus = params.to_vec();
            minus[pi] = param.with_element(flat, x - step);
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic[pi].data()[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        max_rel_errors.push(worst);
    }

    let pass = max_rel_errors.iter().all(|&e| e <= tol);
    Ok(GradReport {
        max_rel_errors,
        pass,
        tolerance: tol,
    })
}


#[cfg(test)]
impl<'t> Var<'t> {
    fn map_nan(&self) -> Var<'t> {
        self.scale(f64::NAN)
    }
}
