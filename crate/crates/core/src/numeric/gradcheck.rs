//! Central finite-difference checks of analytic gradients.

use serde::Serialize;

use crate::error::{CcsError, Result};

use super::{Graph, Tensor, Var};

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    /// Flat index of the entry with the largest error.
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
    /// Distance of the evaluation point from the nearest hinge or switch.
    pub kink_margin: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    /// True when the point sits exactly on a non-differentiable switch.
    pub fn at_kink(&self) -> bool {
        self.kink_margin == 0.0
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

/// Analytic gradients of `f` at `params`, plus the loss value and the kink
/// margin seen while building the graph.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>, f64)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    let grads = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
    Ok((value, grads, g.kink_margin()))
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Compares supplied analytic gradients against central differences.
pub fn compare_with_numeric<F>(
    f: &F,
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            index: pi,
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for k in 0..params[pi].numel() {
            let base = params[pi].data()[k];
            let mut probe = |delta: f64| -> Result<f64> {
                work[pi].data_mut()[k] = base + delta;
                let v = evaluate(f, &work)?;
                if !v.is_finite() {
                    return Err(CcsError::NonFinite(format!(
                        "objective is {v} with parameter {pi} entry {k} perturbed by {delta:+e}"
                    )));
                }
                Ok(v)
            };
            let plus = probe(eps)?;
            let minus = probe(-eps)?;
            work[pi].data_mut()[k] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[k];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || k == 0 {
                check.max_rel_error = err;
                check.worst_entry = k;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        check.passed = check.max_rel_error < tol;
        checks.push(check);
    }
    Ok(checks)
}

/// Checks the reverse-mode gradient of a scalar function of `params` against
/// central differences with step `eps`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (value, analytic, kink_margin) = analytic_gradients(&f, params)?;
    if !value.is_finite() {
        return Err(CcsError::NonFinite(format!(
            "objective is {value} at the unperturbed point"
        )));
    }
    let params_report = compare_with_numeric(&f, params, &analytic, eps, tol)?;
    Ok(GradCheckReport {
        eps,
        tol,
        params: params_report,
        kink_margin,
    })
}
