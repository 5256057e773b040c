//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is used to verify.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

/// Entries whose analytic and numeric magnitudes are both at or below this
/// are not compared relatively.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest relative error over compared entries.
    pub max_rel_error: f64,
    /// Largest absolute error over all entries.
    pub max_abs_error: f64,
    pub compared: usize,
    pub total: usize,
}

impl GradReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

/// Checks d(build(inputs))/d(inputs) against central differences.
///
/// `build` must record a scalar on the tape from the given leaves.
pub fn check<F>(build: F, inputs: &[Tensor], step: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).item()
    };
    compare(inputs.to_vec(), &analytic, step, eval)
}

/// Checks the gradients of every parameter in `store` of a scalar built by
/// `build`, which must register parameters through `Tape::param`.
pub fn check_params<F>(store: &ParamStore, build: F, step: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    tape.backward(loss)?;
    let mut analytic: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
    for (id, g) in tape.param_grads() {
        analytic[id.0] = g.clone();
    }
    let values: Vec<Tensor> = store.iter().map(|(_, _, t)| t.clone()).collect();
    let mut scratch = store.clone();
    let eval = |values: &[Tensor]| -> Result<f64> {
        for (id, v) in store.ids().zip(values) {
            scratch.get_mut(id).data_mut().copy_from_slice(v.data());
        }
        let mut tape = Tape::new();
        let out = build(&mut tape, &scratch)?;
        tape.value(out).item()
    };
    compare(values, &analytic, step, eval)
}

/// Compares `analytic` gradients of a scalar function of `values` against
/// central differences of `eval`.
pub fn compare<F>(
    mut values: Vec<Tensor>,
    analytic: &[Tensor],
    step: f64,
    mut eval: F,
) -> Result<GradReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        compared: 0,
        total: 0,
    };
    for t in 0..values.len() {
        for e in 0..values[t].numel() {
            let orig = values[t].data()[e];
            values[t].data_mut()[e] = orig + step;
            let plus = eval(&values)?;
            values[t].data_mut()[e] = orig - step;
            let minus = eval(&values)?;
            values[t].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[t].data()[e];
            let abs = (a - numeric).abs();
            report.total += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            let mag = a.abs().max(numeric.abs());
            if mag > MAGNITUDE_FLOOR {
                report.compared += 1;
                report.max_rel_error = report.max_rel_error.max(abs / mag);
            }
        }
    }
    Ok(report)
}
