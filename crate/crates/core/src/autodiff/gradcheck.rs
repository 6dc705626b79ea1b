//! Central finite-difference oracle for analytic gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the tape gradient of `f` at `params` against central differences.
///
/// Every coordinate of every parameter is perturbed by `±h`. The returned
/// value is the largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    Ok(finite_difference_report(f, params, h)?
        .iter()
        .map(|c| c.rel_error)
        .fold(0.0, f64::max))
}

/// One perturbed coordinate of a finite-difference check.
#[derive(Clone, Debug)]
pub struct FdCoordinate {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Per-coordinate detail behind [`finite_difference_check`].
pub fn finite_difference_report<F>(f: F, params: &[Tensor], h: f64) -> Result<Vec<FdCoordinate>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::param(format!("step must be positive, got {h}")));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        check_finite(loss.item())?;
        tape.backward(loss)?;
        vars.iter().map(|&v| tape.grad(v)).collect()
    };

    let eval = |point: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|p| tape.constant(p.clone())).collect();
        let v = f(&tape, &vars)?.item();
        check_finite(v)
    };

    let mut point: Vec<Tensor> = params.to_vec();
    let mut report = Vec::new();
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..grad.numel() {
            let orig = point[pi].data()[k];
            point[pi].data_mut()[k] = orig + h;
            let plus = eval(&point)?;
            point[pi].data_mut()[k] = orig - h;
            let minus = eval(&point)?;
            point[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            report.push(FdCoordinate {
                param: pi,
                index: k,
                analytic: a,
                numeric,
                rel_error: (a - numeric).abs() / denom,
            });
        }
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric("finite-difference objective".into()))
    }
}
