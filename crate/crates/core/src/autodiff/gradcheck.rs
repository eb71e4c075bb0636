//! Central finite-difference gradient checking.

use super::{Fault, Graph, Var};
use crate::error::Result;
use crate::tensor::{Precision, Tensor};

/// Outcome of a gradient check over every entry of every input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Worst per-input `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

/// Compares reverse-mode gradients of a scalar function of `inputs` against
/// central differences with the given step. Runs in 64-bit precision.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, fault: Option<Fault>, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(Precision::F64);
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new(Precision::F64);
    if let Some(fault) = fault {
        g = g.with_fault(fault);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        entries: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).unwrap_or(&[]).to_vec();
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for e in 0..inputs[k].numel() {
            let orig = inputs[k].data()[e];
            probe[k].data_mut()[e] = orig + step;
            let up = eval(&probe)?;
            probe[k].data_mut()[e] = orig - step;
            let down = eval(&probe)?;
            probe[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let d = analytic[e] - numeric;
            report.max_abs_err = report.max_abs_err.max(d.abs());
            diff2 += d * d;
            a2 += analytic[e] * analytic[e];
            n2 += numeric * numeric;
            report.entries += 1;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
        report.max_rel_err = report.max_rel_err.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }
    Ok(report)
}
