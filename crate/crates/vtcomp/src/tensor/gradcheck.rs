//! Gradient verification by central finite differences.
//!
//! The checker evaluates a scalar-valued builder twice per parameter
//! coordinate (`+eps`, `-eps`) and compares the quotient against the tape's
//! reverse-mode gradient. Errors are relative to
//! `max(|analytic|, |fd|, floor)` so near-zero coordinates do not produce
//! spurious blowups.

use crate::error::Result;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// Outcome of a gradient check. `max_rel_err` is the headline number; the
/// worst coordinate is kept for diagnostics when a check fails.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
}

/// Reverse-mode gradients of `build` at `params`, one tensor per parameter.
pub fn analytic_gradient<F>(build: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect())
}

fn eval<F>(build: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.value(loss).item()
}

/// Central-difference gradients, one tensor per parameter.
pub fn fd_gradient<F>(build: &F, params: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = Tensor::zeros(params[pi].shape());
        for ci in 0..params[pi].len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ci] += eps;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[ci] -= eps;
            let f_plus = eval(build, &plus)?;
            let f_minus = eval(build, &minus)?;
            grad.data_mut()[ci] = (f_plus - f_minus) / (2.0 * eps);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Worst relative disagreement between two gradient sets.
pub fn max_rel_err(analytic: &[Tensor], fd: &[Tensor], floor: f64) -> GradCheck {
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
    };
    for (pi, (a, f)) in analytic.iter().zip(fd).enumerate() {
        for (ci, (&av, &fv)) in a.data().iter().zip(f.data()).enumerate() {
            let denom = av.abs().max(fv.abs()).max(floor);
            let rel = (av - fv).abs() / denom;
            if rel > out.max_rel_err {
                out = GradCheck {
                    max_rel_err: rel,
                    worst_param: pi,
                    worst_coord: ci,
                };
            }
        }
    }
    out
}

/// Checks reverse-mode gradients of `build` against central differences and
/// returns the worst relative error over every parameter coordinate.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], eps: f64, floor: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradient(&build, params)?;
    let fd = fd_gradient(&build, params, eps)?;
    Ok(max_rel_err(&analytic, &fd, floor))
}
