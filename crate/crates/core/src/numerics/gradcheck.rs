//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it shares no code
//! path with the tape's backward rules.

use super::{ParamSet, Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Per-input comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub names: Vec<String>,
    pub rel_errors: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both gradients vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Checks gradients of a scalar function with respect to free inputs.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.leaf(t)).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut names = Vec::new();
    let mut rel_errors = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += h;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] -= 2.0 * h;
            let down = eval(&xs)?;
            *slot = (up - down) / (2.0 * h);
        }
        names.push(format!("input{i}"));
        rel_errors.push(relative_error(&analytic[i], &numeric));
    }
    Ok(GradReport { names, rel_errors })
}

/// Checks gradients with respect to every tensor in a parameter set.
/// `f` must register the parameters it uses via [`Tape::param`].
pub fn check_params<F>(params: &ParamSet, f: F, h: f64) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &ParamSet) -> Result<Var<'t>>,
{
    let mut work = params.clone();
    work.zero_grad();
    let tape = Tape::new();
    let loss = f(&tape, &work)?;
    tape.backward(loss)?.accumulate_into(&mut work)?;

    let mut names = Vec::new();
    let mut rel_errors = Vec::new();
    for id in params.ids() {
        let analytic = work.get(id).grad().expect("params carry gradients").to_vec();
        let mut probe = params.clone();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + h;
            let up = f(&Tape::new(), &probe)?.item();
            probe.get_mut(id).data_mut()[j] = orig - h;
            let down = f(&Tape::new(), &probe)?.item();
            probe.get_mut(id).data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        names.push(params.name(id).to_string());
        rel_errors.push(relative_error(&analytic, &numeric));
    }
    Ok(GradReport { names, rel_errors })
}
