//! Cross-modal box matching, per-attribute disagreement and the
//! uncertainty-weighted LiDAR loss.

mod hungarian;

pub use hungarian::{assignment_cost, hungarian};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{center_distance, wrap_angle_unchecked, Box7};
use crate::heads::DetectionLoss;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XuaConfig {
    pub enabled: bool,
    pub lambda: f64,
    /// Optional center-distance gate in meters; matches farther apart are
    /// dropped. Off by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<f64>,
}

impl Default for XuaConfig {
    fn default() -> Self {
        Self { enabled: true, lambda: 0.1, gate: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(lidar index, radar index)`, sorted by lidar index.
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    pub fn k(&self) -> usize {
        self.pairs.len()
    }
}

/// Minimum total center distance matching of `k = min(m, n)` pairs.
pub fn match_boxes(lidar: &[Box7], radar: &[Box7], gate: Option<f64>) -> Result<MatchResult> {
    if lidar.is_empty() || radar.is_empty() {
        return Ok(MatchResult::default());
    }
    let cost: Vec<Vec<f64>> = lidar.iter().map(|a| radar.iter().map(|b| center_distance(a, b)).collect()).collect();
    let mut pairs = hungarian(&cost)?;
    if let Some(g) = gate {
        pairs.retain(|&(i, j)| cost[i][j] <= g);
    }
    Ok(MatchResult { pairs })
}

/// Per pair `|D_L - D_R|` by attribute, heading difference wrapped first.
pub fn delta_d(lidar: &[Box7], radar: &[Box7]) -> Result<Vec<[f64; 7]>> {
    if lidar.len() != radar.len() {
        return Err(Error::shape("delta_d", format!("{} vs {} boxes", lidar.len(), radar.len())));
    }
    Ok(lidar
        .iter()
        .zip(radar)
        .map(|(a, b)| {
            let (a, b) = (a.to_array(), b.to_array());
            let mut d = [0.0; 7];
            for i in 0..6 {
                d[i] = (a[i] - b[i]).abs();
            }
            d[6] = wrap_angle_unchecked(a[6] - b[6]).abs();
            d
        })
        .collect())
}

/// Differentiable [`delta_d`] over `k × 7` decoded boxes.
pub fn delta_d_var(tape: &mut Tape, lidar: Var, radar: Var) -> Result<Var> {
    let (k, c) = tape.value(lidar).dims2("delta_d")?;
    if c != 7 || tape.shape(radar) != [k, 7] {
        return Err(Error::shape("delta_d", format!("{:?} vs {:?}", tape.shape(lidar), tape.shape(radar))));
    }
    let diff = tape.sub(lidar, radar)?;
    let lin = tape.slice_cols(diff, 0, 6)?;
    let ang = tape.slice_cols(diff, 6, 7)?;
    let ang = tape.wrap_angle(ang)?;
    let both = tape.concat_cols(&[lin, ang])?;
    tape.abs(both)
}

/// `mean(L ⊙ exp(-ΔD) + λ ΔD)` over all pairs and attributes.
pub fn uncertainty_loss(tape: &mut Tape, per_pair_loss: Var, delta: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::domain("uncertainty_loss", format!("lambda {lambda}")));
    }
    if tape.shape(per_pair_loss) != tape.shape(delta) {
        return Err(Error::shape(
            "uncertainty_loss",
            format!("loss {:?} vs delta {:?}", tape.shape(per_pair_loss), tape.shape(delta)),
        ));
    }
    let neg = tape.scale(delta, -1.0)?;
    let w = tape.exp(neg)?;
    let scaled = tape.mul(per_pair_loss, w)?;
    let reg = tape.scale(delta, lambda)?;
    let total = tape.add(scaled, reg)?;
    tape.mean(total)
}

/// LiDAR detection loss with matched keypoints reweighted by their
/// disagreement. Regression columns of matched rows are scaled by
/// `exp(-ΔD)` attribute-wise, their classification loss by the row mean of
/// `exp(-ΔD)`; unmatched rows keep the plain loss. `λ·mean(ΔD)` is added
/// when any pair exists. Normalizers match [`crate::heads::detection_loss`].
pub fn aligned_lidar_loss(
    tape: &mut Tape,
    plain: &DetectionLoss,
    matched_rows: &[usize],
    delta: Var,
    lambda: f64,
) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::domain("aligned_lidar_loss", format!("lambda {lambda}")));
    }
    if matched_rows.is_empty() {
        return Ok(plain.total);
    }
    let k = matched_rows.len();
    if tape.shape(delta) != [k, 7] {
        return Err(Error::shape("aligned_lidar_loss", format!("{k} rows vs delta {:?}", tape.shape(delta))));
    }
    let m = tape.value(plain.per_point_cls).rows();

    let neg = tape.scale(delta, -1.0)?;
    let w = tape.exp(neg)?;

    let reg = if plain.num_foreground == 0 {
        plain.reg
    } else {
        let sel = tape.gather_rows(plain.per_attribute, matched_rows)?;
        let weighted = tape.mul(sel, w)?;
        let all = tape.sum(plain.per_attribute)?;
        let sel_sum = tape.sum(sel)?;
        let w_sum = tape.sum(weighted)?;
        let rest = tape.sub(all, sel_sum)?;
        let s = tape.add(rest, w_sum)?;
        tape.scale(s, 1.0 / plain.num_foreground as f64)?
    };

    let row_w = {
        let avg = tape.constant(Tensor::full(&[7, 1], 1.0 / 7.0))?;
        tape.matmul(w, avg)?
    };
    let sel = tape.gather_rows(plain.per_point_cls, matched_rows)?;
    let weighted = tape.mul(sel, row_w)?;
    let all = tape.sum(plain.per_point_cls)?;
    let sel_sum = tape.sum(sel)?;
    let w_sum = tape.sum(weighted)?;
    let rest = tape.sub(all, sel_sum)?;
    let cls = tape.add(rest, w_sum)?;
    let cls = tape.scale(cls, 1.0 / m as f64)?;

    let d_mean = tape.mean(delta)?;
    let d_term = tape.scale(d_mean, lambda)?;
    let out = tape.add(reg, cls)?;
    tape.add(out, d_term)
}
