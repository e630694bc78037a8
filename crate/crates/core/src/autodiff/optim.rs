use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    hyper: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(
            "optimizer_step",
            format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (id, g) in params.ids().zip(grads) {
        if params.get(id).shape() != g.shape() {
            return Err(Error::shape(
                "optimizer_step",
                format!("`{}`: param {:?} vs grad {:?}", params.name(id), params.get(id).shape(), g.shape()),
            ));
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hyper.beta1.powf(t);
    let bc2 = 1.0 - hyper.beta2.powf(t);
    for (k, (id, g)) in params.ids().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= hyper.lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data().iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::matrix(1, vals.len(), vals.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = store(&[1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = vec![Tensor::zeros(&[1, 3])];
        for _ in 0..5 {
            optimizer_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let hyper = AdamConfig { lr: 0.01, ..Default::default() };
        let mut p = store(&[0.0, 0.0]);
        let mut st = AdamState::new(&p);
        let g = vec![Tensor::matrix(1, 2, vec![3.0, -0.5]).unwrap()];
        optimizer_step(&mut p, &g, &mut st, &hyper).unwrap();
        // m̂ = g, v̂ = g², step = lr·g/(|g| + eps)
        let expect = |g: f64| -hyper.lr * g / (g.abs() + hyper.eps);
        let d = p.get(p.ids().next().unwrap()).data();
        assert!((d[0] - expect(3.0)).abs() < 1e-15);
        assert!((d[1] - expect(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [1.5, -0.7, 0.25];
        let hyper = AdamConfig { lr: 0.05, ..Default::default() };
        let mut p = store(&[0.0, 0.0, 0.0]);
        let mut st = AdamState::new(&p);
        for _ in 0..500 {
            let id = p.ids().next().unwrap();
            let g: Vec<f64> = p.get(id).data().iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            optimizer_step(&mut p, &[Tensor::matrix(1, 3, g).unwrap()], &mut st, &hyper).unwrap();
        }
        let id = p.ids().next().unwrap();
        for (x, t) in p.get(id).data().iter().zip(&target) {
            assert!((x - t).abs() < 1e-2, "{x} vs {t}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = store(&[0.0, 0.0]);
        let mut st = AdamState::new(&p);
        let g = vec![Tensor::zeros(&[1, 3])];
        assert!(optimizer_step(&mut p, &g, &mut st, &AdamConfig::default()).is_err());
    }
}
