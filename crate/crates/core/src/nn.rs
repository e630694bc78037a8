//! Dense layers and the focal-loss term shared by the motion and
//! classification losses.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Probability clamp applied before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// He-uniform weights, zero bias.
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        let weight =
            store.add(format!("{name}.weight"), Tensor::matrix(fan_in, fan_out, w).expect("positive layer dims"));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]));
        Self { weight, bias }
    }

    pub fn in_features(&self, store: &ParamStore) -> usize {
        store.get(self.weight).rows()
    }

    pub fn out_features(&self, store: &ParamStore) -> usize {
        store.get(self.weight).cols()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        tape.linear(x, w, b)
    }
}

/// Stack of [`Linear`] layers with relu between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` includes the input width, so `[3, 16, 32]` is two layers.
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("`{name}`: bad layer widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn out_features(&self, store: &ParamStore) -> usize {
        self.layers.last().map_or(0, |l| l.out_features(store))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, relu_last: bool) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if relu_last || i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}

/// Elementwise binary focal loss (nonnegative):
/// `-[α y (1-p)^γ log p + (1-α)(1-y) p^γ log(1-p)]`, with `p` clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub fn focal_elementwise(tape: &mut Tape, prob: Var, target: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain("focal", format!("alpha {alpha} outside (0,1)")));
    }
    if !(gamma >= 0.0) {
        return Err(Error::domain("focal", format!("gamma {gamma} negative")));
    }
    if tape.shape(prob) != target.shape() {
        return Err(Error::shape(
            "focal",
            format!("predictions {:?} vs targets {:?}", tape.shape(prob), target.shape()),
        ));
    }
    if target.data().iter().any(|&y| !(0.0..=1.0).contains(&y)) {
        return Err(Error::domain("focal", "targets must lie in [0,1]"));
    }
    let p = tape.clamp(prob, PROB_EPS, 1.0 - PROB_EPS)?;
    let q = {
        let neg = tape.scale(p, -1.0)?;
        tape.offset(neg, 1.0)?
    };
    let y = tape.constant(target.clone())?;
    let ny = tape.constant(target.map(|v| 1.0 - v))?;

    let log_p = tape.log(p)?;
    let log_q = tape.log(q)?;
    let pos = if gamma == 0.0 {
        log_p
    } else {
        let w = tape.powf(q, gamma)?;
        tape.mul(w, log_p)?
    };
    let neg = if gamma == 0.0 {
        log_q
    } else {
        let w = tape.powf(p, gamma)?;
        tape.mul(w, log_q)?
    };
    let pos = tape.mul(pos, y)?;
    let pos = tape.scale(pos, -alpha)?;
    let neg = tape.mul(neg, ny)?;
    let neg = tape.scale(neg, -(1.0 - alpha))?;
    tape.add(pos, neg)
}

/// Scalar reference for [`focal_elementwise`].
pub fn focal_scalar(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(alpha * y * (1.0 - p).powf(gamma) * p.ln() + (1.0 - alpha) * (1.0 - y) * p.powf(gamma) * (1.0 - p).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_shapes_and_zero_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::init(&mut store, "m", &[3, 8, 5], &mut rng).unwrap();
        assert_eq!(store.len(), 4);
        assert_eq!(mlp.out_features(&store), 5);
        for id in mlp.params().collect::<Vec<_>>() {
            let s = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&s);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 3], 2.0)).unwrap();
        let y = mlp.forward(&mut tape, &store, x, false).unwrap();
        assert_eq!(tape.shape(y), &[4, 5]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn focal_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..30).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect();
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::column(p.clone()).unwrap()).unwrap();
        let out = focal_elementwise(&mut tape, pv, &Tensor::column(y.clone()).unwrap(), 0.25, 2.0).unwrap();
        for i in 0..30 {
            let want = focal_scalar(p[i], y[i], 0.25, 2.0);
            assert!((tape.value(out).data()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn focal_rejects_bad_hyperparameters() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::scalar(0.5)).unwrap();
        let y = Tensor::scalar(1.0);
        assert!(focal_elementwise(&mut tape, p, &y, 0.0, 2.0).is_err());
        assert!(focal_elementwise(&mut tape, p, &y, 0.5, -1.0).is_err());
        assert!(focal_elementwise(&mut tape, p, &Tensor::zeros(&[2, 1]), 0.5, 2.0).is_err());
    }
}
