//! Velocity-conditioned attention over radar keypoint features and the
//! per-point motion loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{point_in_box, Point3};
use crate::nn::{focal_elementwise, Mlp, PROB_EPS};
use crate::scene::Annotation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmaeConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub gamma: f64,
    /// Weight of the motion loss relative to the detection losses.
    pub weight: f64,
}

impl Default for DmaeConfig {
    fn default() -> Self {
        Self { enabled: true, alpha: 0.25, gamma: 2.0, weight: 1.0 }
    }
}

/// Weights of one stage's motion module.
#[derive(Debug, Clone, PartialEq)]
pub struct DmaeParams {
    /// `2 → N/2 → N`.
    pub encoder: Mlp,
    /// `N → N/2 → 1`.
    pub head: Mlp,
}

impl DmaeParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) -> Result<Self> {
        let half = (width / 2).max(1);
        Ok(Self {
            encoder: Mlp::init(store, &format!("{prefix}.enc"), &[2, half, width], rng)?,
            head: Mlp::init(store, &format!("{prefix}.head"), &[width, half, 1], rng)?,
        })
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        self.encoder.out_features(store)
    }
}

pub fn encode_velocity(tape: &mut Tape, store: &ParamStore, v: Var, params: &DmaeParams) -> Result<Var> {
    let (_, c) = tape.value(v).dims2("encode_velocity")?;
    if c != 2 {
        return Err(Error::shape("encode_velocity", format!("velocity has {c} columns, expected 2")));
    }
    params.encoder.forward(tape, store, v, false)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionOutput {
    /// `H = A · Encode(v) + f`, forwarded to the next stage.
    pub enhanced: Var,
    /// `M × 1` moving probabilities in `[PROB_EPS, 1 - PROB_EPS]`.
    pub y_hat: Var,
}

/// `A = softmax_rows(f fᵀ / √N)`, `H = A · Encode(v) + f`,
/// `ŷ = clamp(sigmoid(MLP(H)))`.
pub fn dmae_forward(tape: &mut Tape, store: &ParamStore, f: Var, v: Var, params: &DmaeParams) -> Result<MotionOutput> {
    let (m, n) = tape.value(f).dims2("dmae_forward")?;
    let (mv, _) = tape.value(v).dims2("dmae_forward")?;
    if m != mv {
        return Err(Error::shape("dmae_forward", format!("{m} feature rows vs {mv} velocity rows")));
    }
    if params.width(store) != n {
        return Err(Error::shape("dmae_forward", format!("feature width {n} vs module width {}", params.width(store))));
    }
    let ft = tape.transpose(f)?;
    let sim = tape.matmul(f, ft)?;
    let attn = tape.softmax_rows(sim, (n as f64).sqrt())?;
    let enc = encode_velocity(tape, store, v, params)?;
    let mixed = tape.matmul(attn, enc)?;
    let enhanced = tape.add(mixed, f)?;
    let logits = params.head.forward(tape, store, enhanced, false)?;
    let p = tape.sigmoid(logits)?;
    let y_hat = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    Ok(MotionOutput { enhanced, y_hat })
}

/// 1 inside a moving box, 0 inside a static box or in the background.
/// Points inside several boxes take the box with the nearest center.
pub fn label_point_motion(points: &[[f64; 3]], annotations: &[Annotation]) -> Vec<u8> {
    points
        .iter()
        .map(|&p| {
            let p = Point3::from(p);
            annotations
                .iter()
                .filter(|a| point_in_box(p, &a.bbox))
                .map(|a| {
                    let c = a.bbox.center();
                    let d = (p.x - c.x).powi(2) + (p.y - c.y).powi(2) + (p.z - c.z).powi(2);
                    (d, a.moving)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map_or(0, |(_, m)| u8::from(m))
        })
        .collect()
}

/// Mean focal loss between `y_hat` (`M × 1`) and binary labels.
pub fn motion_loss_layer(tape: &mut Tape, y_hat: Var, labels: &[u8], alpha: f64, gamma: f64) -> Result<Var> {
    let (m, c) = tape.value(y_hat).dims2("motion_loss_layer")?;
    if c != 1 || m != labels.len() {
        return Err(Error::shape("motion_loss_layer", format!("predictions {m}x{c} vs {} labels", labels.len())));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::domain("motion_loss_layer", "labels must be 0 or 1"));
    }
    let y = Tensor::column(labels.iter().map(|&y| f64::from(y)).collect())?;
    let per_point = focal_elementwise(tape, y_hat, &y, alpha, gamma)?;
    tape.mean(per_point)
}

/// Mean of the four per-stage motion losses.
pub fn motion_loss_total(tape: &mut Tape, layer_losses: &[Var]) -> Result<Var> {
    if layer_losses.len() != 4 {
        return Err(Error::Invalid(format!("motion loss needs 4 stage losses, got {}", layer_losses.len())));
    }
    let mut acc = layer_losses[0];
    for &l in &layer_losses[1..] {
        acc = tape.add(acc, l)?;
    }
    tape.scale(acc, 0.25)
}
