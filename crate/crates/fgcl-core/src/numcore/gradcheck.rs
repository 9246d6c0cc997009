//! Finite-difference verification of analytic gradients.
//!
//! The oracle is the central difference `(f(x + eps) - f(x - eps)) / (2 eps)`,
//! evaluated entry by entry, which is independent of how the analytic
//! gradients were produced. Errors are reported relative to
//! `max(1, |analytic|, |numeric|)` so tiny gradients are compared absolutely
//! and large ones relatively.

use crate::error::{ensure, FgclError, Result};
use crate::numcore::matrix::DenseMatrix;
use crate::numcore::param::ParamSet;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Entry (row, col) where the worst error occurred.
    pub worst_entry: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    /// Name of the parameter with the worst entry.
    pub worst_param: String,
}

/// Check analytic gradients of `f` against central differences.
///
/// `f(params, true)` must zero nothing itself: this routine zeroes the
/// gradient buffers, calls `f` once with `want_grads = true` to obtain the
/// loss and the accumulated analytic gradients, then re-evaluates the loss
/// with `want_grads = false` at perturbed parameter values. Parameter values
/// are restored exactly before returning. Any non-finite loss aborts with an
/// error naming the parameter and entry under perturbation.
pub fn gradcheck<F>(params: &mut ParamSet, mut f: F, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamSet, bool) -> Result<f64>,
{
    ensure!(eps > 0.0, "gradcheck: eps {eps} must be positive");
    ensure!(!params.is_empty(), "gradcheck: empty parameter set");

    params.zero_gradients();
    let base = f(params, true)?;
    if !base.is_finite() {
        return Err(FgclError::numeric(
            "gradcheck",
            format!("base loss {base} is not finite"),
        ));
    }
    let analytic: Vec<DenseMatrix> = params.iter().map(|p| p.gradient.clone()).collect();

    let mut per_param = Vec::with_capacity(params.len());
    let mut worst = 0.0_f64;
    let mut worst_param = String::new();
    for pi in 0..params.len() {
        let (rows, cols) = analytic[pi].shape();
        let name = params.get(crate::numcore::param::ParamId(pi)).name.clone();
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_entry: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
        };
        for r in 0..rows {
            for c in 0..cols {
                let id = crate::numcore::param::ParamId(pi);
                let original = params.get(id).value[(r, c)];

                params.get_mut(id).value[(r, c)] = original + eps;
                let plus = f(params, false)?;
                params.get_mut(id).value[(r, c)] = original - eps;
                let minus = f(params, false)?;
                params.get_mut(id).value[(r, c)] = original;

                if !plus.is_finite() || !minus.is_finite() {
                    return Err(FgclError::numeric(
                        "gradcheck",
                        format!("loss not finite perturbing {name}[{r},{c}]"),
                    ));
                }
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic[pi][(r, c)];
                let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
                if rel > check.max_rel_err {
                    check.max_rel_err = rel;
                    check.worst_entry = (r, c);
                    check.analytic = a;
                    check.numeric = numeric;
                }
            }
        }
        if check.max_rel_err > worst {
            worst = check.max_rel_err;
            worst_param = name;
        }
        per_param.push(check);
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: worst,
        worst_param,
    })
}
