//! Average precision with greedy 3D-IoU matching and interpolated
//! precision at evenly spaced recall points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{iou3d, Box7, Corridor};
use crate::heads::BoxPrediction;
use crate::scene::{Annotation, ObjectClass};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: ObjectClass,
    pub bbox: Box7,
    pub confidence: f64,
}

impl From<&BoxPrediction> for Detection {
    fn from(p: &BoxPrediction) -> Self {
        Self { class: p.class(), bbox: p.bbox, confidence: p.confidence() }
    }
}

/// Detections and ground truth of one frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameResult {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<Annotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    All,
    Corridor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Car, pedestrian, cyclist.
    pub iou_thresholds: [f64; 3],
    pub corridor: Corridor,
    pub recall_points: usize,
    /// Speed above which the naive baseline calls a radar point moving, m/s.
    pub motion_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: [0.5, 0.25, 0.25],
            corridor: Corridor::default(),
            recall_points: 40,
            motion_threshold: 0.1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Config(format!("eval.iou_thresholds {:?} must lie in (0,1]", self.iou_thresholds)));
        }
        if self.recall_points == 0 {
            return Err(Error::Config("eval.recall_points must be positive".into()));
        }
        if !(self.motion_threshold >= 0.0 && self.motion_threshold.is_finite()) {
            return Err(Error::Config("eval.motion_threshold must be >= 0".into()));
        }
        let c = &self.corridor;
        if !(c.x_min < c.x_max && c.y_half_width > 0.0) {
            return Err(Error::Config(format!("eval.corridor {c:?} is empty")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub num_gt: usize,
}

/// AP of one class over a set of frames. `None` when no ground truth of the
/// class falls in the region.
pub fn average_precision(
    frames: &[FrameResult],
    class: ObjectClass,
    iou_threshold: f64,
    region: Option<&Corridor>,
    recall_points: usize,
) -> Option<ClassAp> {
    let keep = |b: &Box7| region.is_none_or(|c| c.contains(b));
    let gts: Vec<Vec<Box7>> = frames
        .iter()
        .map(|f| f.ground_truth.iter().filter(|a| a.class == class && keep(&a.bbox)).map(|a| a.bbox).collect())
        .collect();
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return None;
    }
    let mut dets: Vec<(f64, usize, &Box7)> = frames
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| {
            f.detections.iter().filter(|d| d.class == class && keep(&d.bbox)).map(move |d| (d.confidence, fi, &d.bbox))
        })
        .collect();
    // stable sort keeps frame/detection order among equal confidences
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(dets.len());
    for &(_, fi, b) in &dets {
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gts[fi].iter().enumerate() {
            if matched[fi][gi] {
                continue;
            }
            let iou = iou3d(b, g);
            if iou >= iou_threshold && best.is_none_or(|(bi, _)| iou > bi) {
                best = Some((iou, gi));
            }
        }
        if let Some((_, gi)) = best {
            matched[fi][gi] = true;
        }
        hits.push(best.is_some());
    }
    let ap = interpolated_ap(&hits, num_gt, recall_points);
    let tp = hits.iter().filter(|&&h| h).count();
    Some(ClassAp { ap, tp, fp: hits.len() - tp, fn_: num_gt - tp, num_gt })
}

/// Mean over `r = 1/n, 2/n, …, 1` of the maximum precision at recall ≥ r,
/// given the TP/FP outcome of each detection in confidence order.
pub fn interpolated_ap(hits: &[bool], num_gt: usize, recall_points: usize) -> f64 {
    if num_gt == 0 || recall_points == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // running max of precision from the right
    let mut best = vec![0.0; curve.len()];
    let mut m: f64 = 0.0;
    for i in (0..curve.len()).rev() {
        m = m.max(curve[i].1);
        best[i] = m;
    }
    let mut sum = 0.0;
    for r in 1..=recall_points {
        let t = r as f64 / recall_points as f64;
        // first index with recall ≥ t (recall is nondecreasing)
        let idx = curve.partition_point(|&(rec, _)| rec < t - 1e-12);
        if idx < curve.len() {
            sum += best[idx];
        }
    }
    sum / recall_points as f64
}

/// Mean of the classes that have ground truth.
pub fn mean_ap(per_class: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Invalid("mAP over zero classes".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class: ObjectClass,
    pub result: Option<ClassAp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub region: Region,
    pub classes: Vec<ClassEntry>,
    /// `None` when no class has ground truth in the region.
    pub map: Option<f64>,
}

impl RegionReport {
    pub fn ap(&self, class: ObjectClass) -> Option<f64> {
        self.classes.iter().find(|e| e.class == class).and_then(|e| e.result.map(|r| r.ap))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub num_frames: usize,
    pub all: RegionReport,
    pub corridor: RegionReport,
}

pub fn evaluate_region(frames: &[FrameResult], cfg: &EvalConfig, region: Region) -> RegionReport {
    let corridor = match region {
        Region::All => None,
        Region::Corridor => Some(&cfg.corridor),
    };
    let classes: Vec<ClassEntry> = ObjectClass::ALL
        .iter()
        .map(|&c| ClassEntry {
            class: c,
            result: average_precision(frames, c, cfg.iou_thresholds[c.index()], corridor, cfg.recall_points),
        })
        .collect();
    let aps: Vec<Option<f64>> = classes.iter().map(|e| e.result.map(|r| r.ap)).collect();
    RegionReport { region, map: mean_ap(&aps).ok(), classes }
}

pub fn evaluate(frames: &[FrameResult], cfg: &EvalConfig, config_hash: &str, seed: u64) -> EvalReport {
    EvalReport {
        config_hash: config_hash.to_string(),
        seed,
        num_frames: frames.len(),
        all: evaluate_region(frames, cfg, Region::All),
        corridor: evaluate_region(frames, cfg, Region::Corridor),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(x: f64, y: f64) -> Annotation {
        Annotation { class: ObjectClass::Car, bbox: Box7::new(x, y, 0.0, 4.0, 1.8, 1.6, 0.0).unwrap(), moving: false }
    }

    fn det(a: &Annotation, conf: f64) -> Detection {
        Detection { class: a.class, bbox: a.bbox, confidence: conf }
    }

    #[test]
    fn perfect_and_empty() {
        let gt = vec![car(10.0, 0.0), car(20.0, 5.0)];
        let perfect = FrameResult { detections: gt.iter().map(|a| det(a, 1.0)).collect(), ground_truth: gt.clone() };
        let r = average_precision(&[perfect], ObjectClass::Car, 0.5, None, 40).unwrap();
        assert_eq!(r.ap, 1.0);
        let empty = FrameResult { detections: vec![], ground_truth: gt };
        let r = average_precision(std::slice::from_ref(&empty), ObjectClass::Car, 0.5, None, 40).unwrap();
        assert_eq!((r.ap, r.fn_), (0.0, 2));
        assert!(average_precision(&[empty], ObjectClass::Pedestrian, 0.25, None, 40).is_none());
    }

    // One TP (conf 0.9) then one FP (conf 0.5) against 2 GTs: recall reaches
    // 1/2 at precision 1, so 20 of the 40 recall points score 1.
    #[test]
    fn two_gt_staircase() {
        let gt = vec![car(10.0, 0.0), car(20.0, 5.0)];
        let fr = FrameResult { detections: vec![det(&gt[0], 0.9), det(&car(40.0, -10.0), 0.5)], ground_truth: gt };
        let r = average_precision(&[fr], ObjectClass::Car, 0.5, None, 40).unwrap();
        assert!((r.ap - 0.5).abs() < 1e-12);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 1));
    }

    #[test]
    fn interpolation_uses_best_precision_to_the_right() {
        // FP, TP, TP over 2 GT: precision at recall 1 is 2/3
        let ap = interpolated_ap(&[false, true, true], 2, 40);
        assert!((ap - 2.0 / 3.0).abs() < 1e-12);
        // TP, FP, TP over 2 GT: first half 1, second half 2/3
        let ap = interpolated_ap(&[true, false, true], 2, 40);
        assert!((ap - (20.0 + 20.0 * 2.0 / 3.0) / 40.0).abs() < 1e-12);
    }

    #[test]
    fn mean_ap_examples() {
        assert_eq!(mean_ap(&[Some(1.0), Some(1.0), Some(1.0)]).unwrap(), 1.0);
        assert!((mean_ap(&[Some(0.5), Some(0.7), Some(0.9)]).unwrap() - 0.7).abs() < 1e-15);
        assert!((mean_ap(&[Some(0.4), None, Some(0.8)]).unwrap() - 0.6).abs() < 1e-15);
        assert!(mean_ap(&[None, None]).is_err());
    }

    #[test]
    fn corridor_filters_both_sides() {
        let inside = car(10.0, 0.0);
        let outside = car(40.0, 10.0);
        let fr = FrameResult { detections: vec![det(&outside, 0.99), det(&inside, 0.5)], ground_truth: vec![inside] };
        let cfg = EvalConfig::default();
        let all = evaluate_region(std::slice::from_ref(&fr), &cfg, Region::All);
        let cor = evaluate_region(&[fr], &cfg, Region::Corridor);
        assert_eq!(all.ap(ObjectClass::Car), Some(0.5));
        assert_eq!(cor.ap(ObjectClass::Car), Some(1.0));
    }
}
