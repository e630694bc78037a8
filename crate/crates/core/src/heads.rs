//! Per-keypoint box heads: decoding, suppression, target assignment and the
//! detection loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{bev_iou, point_in_box, Box7, Point3};
use crate::nn::{focal_elementwise, Mlp};
use crate::scene::{Annotation, ObjectClass};

/// Regression values per keypoint: dx, dy, dz, log-l, log-w, log-h, sin, cos.
pub const REG_DIM: usize = 8;
/// Regression + class logits + objectness.
pub const HEAD_OUT: usize = REG_DIM + ObjectClass::COUNT + 1;
const OBJ_COL: usize = REG_DIM + ObjectClass::COUNT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    /// `(l, w, h)` per class, in [`ObjectClass::index`] order.
    pub anchors: [[f64; 3]; 3],
    pub objectness_threshold: f64,
    pub nms_iou: f64,
    /// Boxes are grown by this much when assigning keypoints, so surface
    /// points displaced outward by sensor noise still count as foreground.
    pub assign_margin: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            anchors: [[4.0, 1.8, 1.6], [0.6, 0.6, 1.7], [1.8, 0.6, 1.7]],
            objectness_threshold: 0.3,
            nms_iou: 0.5,
            assign_margin: 0.1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("head hidden width must be positive".into()));
        }
        if self.anchors.iter().flatten().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Config(format!("anchors must be positive: {:?}", self.anchors)));
        }
        if !(0.0..=1.0).contains(&self.objectness_threshold) || !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Config("head thresholds must lie in [0,1]".into()));
        }
        if !(self.assign_margin >= 0.0) || !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config("assign margin must be >= 0 and smooth-L1 beta > 0".into()));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) || !(self.focal_gamma >= 0.0) {
            return Err(Error::Config("focal alpha must be in (0,1), gamma >= 0".into()));
        }
        Ok(())
    }

    pub fn anchor(&self, class: ObjectClass) -> [f64; 3] {
        self.anchors[class.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub mlp: Mlp,
}

impl HeadParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self { mlp: Mlp::init(store, prefix, &[in_width, hidden, HEAD_OUT], rng)? })
    }
}

/// Raw `M × HEAD_OUT` head output.
pub fn head_forward(tape: &mut Tape, store: &ParamStore, features: Var, params: &HeadParams) -> Result<Var> {
    params.mlp.forward(tape, store, features, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub bbox: Box7,
    pub class_scores: [f64; 3],
    pub objectness: f64,
    /// Row of the keypoint that produced this box.
    pub keypoint: usize,
}

impl BoxPrediction {
    pub fn class(&self) -> ObjectClass {
        let mut best = 0;
        for c in 1..3 {
            if self.class_scores[c] > self.class_scores[best] {
                best = c;
            }
        }
        ObjectClass::ALL[best]
    }

    pub fn confidence(&self) -> f64 {
        self.objectness * self.class_scores[self.class().index()]
    }
}

/// Inverse of [`decode_box`].
pub fn encode_target(gt: &Box7, keypoint: [f64; 3], anchor: [f64; 3]) -> [f64; REG_DIM] {
    [
        gt.x - keypoint[0],
        gt.y - keypoint[1],
        gt.z - keypoint[2],
        (gt.l / anchor[0]).ln(),
        (gt.w / anchor[1]).ln(),
        (gt.h / anchor[2]).ln(),
        gt.theta.sin(),
        gt.theta.cos(),
    ]
}

pub fn decode_box(reg: &[f64], keypoint: [f64; 3], anchor: [f64; 3]) -> Result<Box7> {
    if reg.len() != REG_DIM {
        return Err(Error::shape("decode_box", format!("{} regression values", reg.len())));
    }
    // clamp log-sizes so an untrained head cannot produce infinite boxes
    let size = |i: usize| anchor[i - 3] * reg[i].clamp(-5.0, 5.0).exp();
    Box7::new(
        keypoint[0] + reg[0],
        keypoint[1] + reg[1],
        keypoint[2] + reg[2],
        size(3),
        size(4),
        size(5),
        reg[6].atan2(reg[7]),
    )
}

/// Every keypoint's box, without thresholding.
pub fn decode_predictions(raw: &Tensor, keypoints: &[[f64; 3]], cfg: &HeadConfig) -> Result<Vec<BoxPrediction>> {
    let (m, c) = raw.dims2("decode_predictions")?;
    if c != HEAD_OUT || m != keypoints.len() {
        return Err(Error::shape("decode_predictions", format!("raw {m}x{c} for {} keypoints", keypoints.len())));
    }
    (0..m)
        .map(|i| {
            let r = raw.row(i);
            let class_scores = [sigmoid(r[REG_DIM]), sigmoid(r[REG_DIM + 1]), sigmoid(r[REG_DIM + 2])];
            let mut p = BoxPrediction {
                bbox: Box7::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0)?,
                class_scores,
                objectness: sigmoid(r[OBJ_COL]),
                keypoint: i,
            };
            p.bbox = decode_box(&r[..REG_DIM], keypoints[i], cfg.anchor(p.class()))?;
            Ok(p)
        })
        .collect()
}

/// Greedy class-agnostic suppression by BEV IoU, highest objectness first.
/// Ties keep the lower keypoint index.
pub fn nms(preds: &[BoxPrediction], iou_threshold: f64) -> Vec<BoxPrediction> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].objectness.total_cmp(&preds[a].objectness).then(a.cmp(&b)));
    let mut kept: Vec<BoxPrediction> = Vec::new();
    for i in order {
        if kept.iter().all(|k| bev_iou(&k.bbox, &preds[i].bbox) < iou_threshold) {
            kept.push(preds[i]);
        }
    }
    kept
}

/// Objectness threshold followed by NMS.
pub fn filter_predictions(preds: &[BoxPrediction], cfg: &HeadConfig) -> Vec<BoxPrediction> {
    let above: Vec<BoxPrediction> =
        preds.iter().filter(|p| p.objectness >= cfg.objectness_threshold).copied().collect();
    nms(&above, cfg.nms_iou)
}

/// [`decode_predictions`] + [`filter_predictions`].
pub fn detect(raw: &Tensor, keypoints: &[[f64; 3]], cfg: &HeadConfig) -> Result<Vec<BoxPrediction>> {
    Ok(filter_predictions(&decode_predictions(raw, keypoints, cfg)?, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTarget {
    pub foreground: bool,
    pub class: Option<ObjectClass>,
    pub encoded: [f64; REG_DIM],
    /// Index of the assigned annotation.
    pub object: Option<usize>,
}

impl BoxTarget {
    fn background() -> Self {
        Self { foreground: false, class: None, encoded: [0.0; REG_DIM], object: None }
    }
}

pub fn assign_targets(keypoints: &[[f64; 3]], annotations: &[Annotation], cfg: &HeadConfig) -> Vec<BoxTarget> {
    let grown: Vec<Box7> = annotations.iter().map(|a| a.bbox.enlarged(cfg.assign_margin)).collect();
    keypoints
        .iter()
        .map(|&k| {
            let p = Point3::from(k);
            let hit = grown
                .iter()
                .enumerate()
                .filter(|(_, b)| point_in_box(p, b))
                .map(|(i, b)| {
                    let d = (p.x - b.x).powi(2) + (p.y - b.y).powi(2) + (p.z - b.z).powi(2);
                    (d, i)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            match hit {
                None => BoxTarget::background(),
                Some((_, i)) => {
                    let a = &annotations[i];
                    BoxTarget {
                        foreground: true,
                        class: Some(a.class),
                        encoded: encode_target(&a.bbox, k, cfg.anchor(a.class)),
                        object: Some(i),
                    }
                }
            }
        })
        .collect()
}

/// Maps the 8 regression columns onto the 7 box attributes; sin and cos
/// both land on the heading column.
pub fn attribute_map() -> Tensor {
    let mut t = Tensor::zeros(&[REG_DIM, 7]);
    for r in 0..REG_DIM {
        let c = r.min(6);
        t.data_mut()[r * 7 + c] = 1.0;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionLoss {
    /// Smooth-L1 over the regression columns, summed over foreground and
    /// divided by the foreground count (0 without foreground).
    pub reg: Var,
    /// Focal class + objectness loss averaged over all keypoints.
    pub cls: Var,
    pub total: Var,
    /// `M × 7` masked per-attribute regression loss.
    pub per_attribute: Var,
    /// `M × 1` per-keypoint classification loss.
    pub per_point_cls: Var,
    pub num_foreground: usize,
}

pub fn detection_loss(tape: &mut Tape, raw: Var, targets: &[BoxTarget], cfg: &HeadConfig) -> Result<DetectionLoss> {
    let (m, c) = tape.value(raw).dims2("detection_loss")?;
    if c != HEAD_OUT || m != targets.len() {
        return Err(Error::shape("detection_loss", format!("raw {m}x{c} vs {} targets", targets.len())));
    }
    let n_fg = targets.iter().filter(|t| t.foreground).count();

    let reg_pred = tape.slice_cols(raw, 0, REG_DIM)?;
    let reg_tgt = tape.constant(Tensor::matrix(m, REG_DIM, targets.iter().flat_map(|t| t.encoded).collect())?)?;
    let diff = tape.sub(reg_pred, reg_tgt)?;
    let sl1 = tape.smooth_l1(diff, cfg.smooth_l1_beta)?;
    let mask = tape.constant(Tensor::column(targets.iter().map(|t| f64::from(u8::from(t.foreground))).collect())?)?;
    let masked = tape.mul_col(sl1, mask)?;
    let amap = tape.constant(attribute_map())?;
    let per_attribute = tape.matmul(masked, amap)?;
    let reg = if n_fg == 0 {
        tape.constant(Tensor::scalar(0.0))?
    } else {
        let s = tape.sum(per_attribute)?;
        tape.scale(s, 1.0 / n_fg as f64)?
    };

    let logits = tape.slice_cols(raw, REG_DIM, HEAD_OUT)?;
    let probs = tape.sigmoid(logits)?;
    let mut onehot = vec![0.0; m * 4];
    for (i, t) in targets.iter().enumerate() {
        if let Some(cl) = t.class {
            onehot[i * 4 + cl.index()] = 1.0;
            onehot[i * 4 + 3] = 1.0;
        }
    }
    let focal = focal_elementwise(tape, probs, &Tensor::matrix(m, 4, onehot)?, cfg.focal_alpha, cfg.focal_gamma)?;
    let ones = tape.constant(Tensor::full(&[4, 1], 1.0))?;
    let per_point_cls = tape.matmul(focal, ones)?;
    let cls = tape.mean(per_point_cls)?;
    let total = tape.add(reg, cls)?;
    Ok(DetectionLoss { reg, cls, total, per_attribute, per_point_cls, num_foreground: n_fg })
}

/// Differentiable decode of selected rows into `k × 7` boxes
/// `(x, y, z, l, w, h, θ)`, with θ from `atan2(sin, cos)`.
pub fn decode_rows_var(
    tape: &mut Tape,
    raw: Var,
    rows: &[usize],
    keypoints: &[[f64; 3]],
    anchors: &[[f64; 3]],
) -> Result<Var> {
    if rows.len() != anchors.len() {
        return Err(Error::shape("decode_rows", format!("{} rows, {} anchors", rows.len(), anchors.len())));
    }
    let sel = tape.gather_rows(raw, rows)?;
    let off = tape.slice_cols(sel, 0, 3)?;
    let kp: Vec<f64> = rows
        .iter()
        .map(|&r| keypoints.get(r).copied().ok_or_else(|| Error::shape("decode_rows", format!("row {r}"))))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let kp = tape.constant(Tensor::matrix(rows.len(), 3, kp)?)?;
    let center = tape.add(off, kp)?;
    let logs = tape.slice_cols(sel, 3, 6)?;
    let logs = tape.clamp(logs, -5.0, 5.0)?;
    let e = tape.exp(logs)?;
    let anc = tape.constant(Tensor::matrix(rows.len(), 3, anchors.iter().flatten().copied().collect())?)?;
    let size = tape.mul(e, anc)?;
    let s = tape.slice_cols(sel, 6, 7)?;
    let c = tape.slice_cols(sel, 7, 8)?;
    let theta = tape.atan2(s, c)?;
    tape.concat_cols(&[center, size, theta])
}
