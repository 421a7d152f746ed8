//! Central finite-difference gradient checks.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over every scalar parameter.
    pub max_rel_err: f64,
    /// Largest relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    /// `(parameter, flat index)` of the worst entry.
    pub worst: (usize, usize),
}

/// `|a - c| / max(|a|, |c|, 1e-12)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Central-difference formula used for the numeric derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    Central2,
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, error `O(h^4)`.
    Central4,
}

/// Compares reverse-mode gradients of `f` against two-point central
/// differences with step `step` for every scalar entry of `params`.
///
/// `f` receives a fresh graph and the parameter leaves and returns a scalar.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, params, step, Stencil::Central2)
}

/// [`grad_check`] with an explicit stencil.
pub fn grad_check_with<F>(f: F, params: &[Tensor<f64>], step: f64, stencil: Stencil) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(alloc::format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        g.grad_map(root, &vars)?.into_tensors()
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, per_param: Vec::new(), worst: (0, 0) };
    for p in 0..params.len() {
        let mut worst_here = 0.0f64;
        for i in 0..params[p].numel() {
            let base = params[p].data()[i];
            let mut probe = |k: f64| -> Result<f64> {
                work[p].data_mut()[i] = base + k * step;
                let v = eval(&work)?;
                work[p].data_mut()[i] = base;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFiniteProbe { param: p, index: i })
                }
            };
            let numeric = match stencil {
                Stencil::Central2 => (probe(1.0)? - probe(-1.0)?) / (2.0 * step),
                Stencil::Central4 => {
                    (8.0 * (probe(1.0)? - probe(-1.0)?) - (probe(2.0)? - probe(-2.0)?)) / (12.0 * step)
                }
            };
            let err = rel_error(analytic[p].data()[i], numeric);
            worst_here = worst_here.max(err);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (p, i);
            }
        }
        report.per_param.push(worst_here);
    }
    Ok(report)
}
