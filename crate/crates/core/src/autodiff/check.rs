//! Central finite-difference gradient verification.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1e-6, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Value of `f` and the branch pattern of its tape.
fn eval_scalar<F>(f: &F, store: &ParamStore) -> Result<(f64, Vec<i64>)>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Backward(format!("grad_check needs a scalar, got {:?}", v.shape())));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "grad_check".into() });
    }
    Ok((x, tape.branch_pattern()))
}

/// Richardson-extrapolated five-point central difference of `at` around 0:
/// `(16 D(h/2) - D(h)) / 15`. A stencil whose probes leave the smooth piece
/// of the base point (a ReLU, clamp or max switching) is retried with a ten
/// times smaller step, up to four times; the last estimate is kept
/// otherwise.
fn derivative(mut at: impl FnMut(f64) -> Result<(f64, Vec<i64>)>, base: &[i64], step: f64) -> Result<f64> {
    let mut h = step;
    let mut estimate = 0.0;
    for _ in 0..5 {
        let mut smooth = true;
        let mut five_point = |h: f64| -> Result<f64> {
            let probes = [at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?];
            smooth &= probes.iter().all(|(_, p)| p == base);
            Ok((8.0 * (probes[0].0 - probes[1].0) - (probes[2].0 - probes[3].0)) / (12.0 * h))
        };
        let coarse = five_point(h)?;
        let fine = five_point(h / 2.0)?;
        estimate = (16.0 * fine - coarse) / 15.0;
        if smooth {
            break;
        }
        h /= 10.0;
    }
    Ok(estimate)
}

/// Compares reverse-mode gradients of `f` against extrapolated central
/// differences with the given step, over every coordinate of every tensor in `store`.
pub fn grad_check_params<F>(f: F, store: &ParamStore, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let base = tape.branch_pattern();
    let analytic = tape.backward(out)?.param_grads(store);

    let mut probe = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, analytic: 0.0, numeric: 0.0, coordinates: 0 };
    let ids: Vec<ParamId> = store.ids().collect();
    for (p, id) in ids.into_iter().enumerate() {
        for k in 0..store.get(id).len() {
            let x0 = store.get(id).data()[k];
            let numeric = derivative(
                |dx| {
                    probe.get_mut(id).data_mut()[k] = x0 + dx;
                    eval_scalar(&f, &probe)
                },
                &base,
                step,
            )?;
            probe.get_mut(id).data_mut()[k] = x0;

            let a = analytic[p].data()[k];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((p, k));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// [`grad_check_params`] over free-standing input tensors; `f` receives one
/// tape variable per input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    for (i, t) in inputs.iter().enumerate() {
        store.add(format!("input{i}"), t.clone());
    }
    grad_check_params(
        |tape, s| {
            let vars = s.ids().map(|id| tape.param(s, id)).collect::<Result<Vec<_>>>()?;
            f(tape, &vars)
        },
        &store,
        step,
    )
}
