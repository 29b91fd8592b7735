use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::Result;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: Real,
    pub worst_index: usize,
    pub checked: usize,
    pub tol: Real,
    pub passed: bool,
}

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error instead.
const REL_FLOOR: Real = 1e-6;

pub fn grad_check<F>(f: F, x: &Tensor, h: Real, tol: Real) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_sampled(f, x, h, tol, usize::MAX)
}

/// Like [`grad_check`] but probes at most `max_entries` coordinates, spread
/// evenly over the tensor.
pub fn grad_check_sampled<F>(
    f: F,
    x: &Tensor,
    h: Real,
    tol: Real,
    max_entries: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<Real> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let n = x.len();
    let stride = n.div_ceil(max_entries.max(1)).max(1);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        tol,
        passed: true,
    };
    for i in (0..n).step_by(stride) {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
