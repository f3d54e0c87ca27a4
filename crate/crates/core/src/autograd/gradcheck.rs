//! Central finite-difference checks for tape gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::tensor::Matrix;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Per-tensor comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; the absolute difference when both norms are
/// below `1e-6` (a vanishing gradient leaves only finite-difference noise).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-6 {
        diff
    } else {
        diff / denom
    }
}

fn eval(params: &ParamStore, build: &impl Fn(&mut Tape) -> Var) -> f64 {
    let mut tape = Tape::new(params);
    let loss = build(&mut tape);
    tape.value(loss).item()
}

/// Checks every parameter in `ids` (all parameters when `None`).
pub fn check_params(
    params: &ParamStore,
    ids: Option<&[ParamId]>,
    build: impl Fn(&mut Tape) -> Var,
    step: f64,
) -> Vec<GradReport> {
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape);
        tape.backward(loss).params
    };
    let all: Vec<ParamId> = params.ids().collect();
    let ids = ids.unwrap_or(&all);
    let mut work = params.clone();
    let mut out = Vec::new();
    for &id in ids {
        let n = params.get(id).len();
        let mut numeric = vec![0.0; n];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + step;
            let up = eval(&work, &build);
            work.get_mut(id).data_mut()[k] = orig - step;
            let down = eval(&work, &build);
            work.get_mut(id).data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let a = analytic.get(id).data();
        out.push(GradReport {
            name: params.name(id).to_string(),
            rel_error: relative_error(a, &numeric),
            analytic_norm: a.iter().map(|x| x * x).sum::<f64>().sqrt(),
        });
    }
    out
}

/// Checks the gradient w.r.t. a single input matrix fed via [`Tape::input`].
pub fn check_input(
    params: &ParamStore,
    input: &Matrix,
    build: impl Fn(&mut Tape, Var) -> Var,
    step: f64,
) -> GradReport {
    let analytic = {
        let mut tape = Tape::new(params);
        let x = tape.input(input.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        grads.wrt(x).cloned().unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()))
    };
    let mut x = input.clone();
    let mut numeric = vec![0.0; x.len()];
    let f = |m: &Matrix| {
        let mut tape = Tape::new(params);
        let v = tape.input(m.clone());
        let loss = build(&mut tape, v);
        tape.value(loss).item()
    };
    for (k, slot) in numeric.iter_mut().enumerate() {
        let orig = x.data()[k];
        x.data_mut()[k] = orig + step;
        let up = f(&x);
        x.data_mut()[k] = orig - step;
        let down = f(&x);
        x.data_mut()[k] = orig;
        *slot = (up - down) / (2.0 * step);
    }
    GradReport {
        name: "input".into(),
        rel_error: relative_error(analytic.data(), &numeric),
        analytic_norm: analytic.data().iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// Largest relative error across reports.
pub fn worst(reports: &[GradReport]) -> f64 {
    reports.iter().map(|r| r.rel_error).fold(0.0, f64::max)
}
