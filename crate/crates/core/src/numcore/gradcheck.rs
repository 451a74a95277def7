//! Central finite-difference oracle for tape gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub label: String,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub epsilon: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares `analytic` gradients against central differences of `eval`.
///
/// This is the primitive behind [`grad_check`]; it takes the analytic side as
/// plain data so a caller can hand it anything, including a deliberately
/// wrong gradient.
pub fn compare_gradients(
    label: &str,
    names: &[String],
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    tol: f64,
    mut eval: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(Error::contract("grad_check epsilon must be positive"));
    }
    if analytic.len() != params.len() || names.len() != params.len() {
        return Err(Error::contract("grad_check: params/gradients/names length mismatch"));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (p, (name, grad)) in names.iter().zip(analytic).enumerate() {
        if grad.shape() != params[p].shape() {
            return Err(Error::shape("grad_check", grad.shape(), params[p].shape()));
        }
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || !err.is_finite() || i == 0 {
                check.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        checks.push(check);
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        label: label.to_string(),
        params: checks,
        max_rel_error,
        epsilon: eps,
        tolerance: tol,
        passed: max_rel_error < tol,
    })
}

/// Checks the tape gradient of the scalar function `f` w.r.t. each tensor in
/// `params` by central differences.
///
/// `f` records its computation on the supplied tape, consuming the leaf
/// variables it is handed. Two forward passes must agree bit-for-bit;
/// otherwise the function is not deterministic and gradients cannot be
/// checked.
pub fn grad_check<F>(
    label: &str,
    params: &[Tensor],
    eps: f64,
    tol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::contract("grad_check function must return a scalar"));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.var(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let first = tape.value(out).clone();
    let second = eval(params)?;
    if first.len() != 1 || first.item().to_bits() != second.to_bits() {
        return Err(Error::contract(format!(
            "grad_check: function is not deterministic ({} vs {second})",
            first.data()[0]
        )));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();
    let names: Vec<String> = (0..params.len()).map(|i| format!("param{i}")).collect();
    compare_gradients(label, &names, params, &analytic, eps, tol, eval)
}
