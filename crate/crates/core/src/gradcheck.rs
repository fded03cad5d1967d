//! Central-difference verification of reverse-mode gradients.

use crate::autodiff::{Backend, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// The objective produced a non-finite value at a perturbed point.
    pub non_finite: bool,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.params
            .iter()
            .all(|p| !p.non_finite && p.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Relative error with a floor on the magnitude: `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares the tape gradient of `objective` against central differences
/// with step `step` for every element of every parameter.
pub fn grad_check<F>(objective: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = objective(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |ps: &[Tensor]| -> Option<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p)).collect();
        let l = objective(&mut t, &vs).ok()?;
        let v = t.value(&l).item();
        v.is_finite().then_some(v)
    };

    let mut report = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut check = ParamCheck {
            index: pi,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            non_finite: false,
        };
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + step;
            let plus = eval(&work);
            work[pi].data_mut()[e] = orig - step;
            let minus = eval(&work);
            work[pi].data_mut()[e] = orig;
            match (plus, minus) {
                (Some(p), Some(m)) => {
                    let numeric = (p - m) / (2.0 * step);
                    let a = analytic.data()[e];
                    check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
                    check.max_rel_err = check.max_rel_err.max(rel_err(a, numeric));
                }
                _ => check.non_finite = true,
            }
        }
        report.push(check);
    }
    Ok(GradReport {
        params: report,
        tol,
    })
}
