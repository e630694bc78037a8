//! Data loading, the minibatch training loop and held-out evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grad_norm, optimizer_step, AdamState, ParamStore, Tape, Tensor};
use crate::config::{short_hash, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Detection, EvalReport, FrameResult};
use crate::io::{encode_cloud, format_labels, read_frame, read_manifest, Checkpoint};
use crate::model::{prepare_frame, Detector, PreparedFrame};
use crate::scene::SceneFrame;
use crate::sim::{frame_seed, gen_frames};

/// Index mixed into the run seed to derive the weight-init seed.
const INIT_STREAM: u64 = u64::MAX;
/// Offset of the per-epoch shuffle streams.
const SHUFFLE_STREAM: u64 = 1 << 62;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<PreparedFrame>,
    pub eval: Vec<PreparedFrame>,
    /// Digest of every frame in both splits.
    pub split_hash: String,
}

fn frames_digest(train: &[SceneFrame], eval: &[SceneFrame]) -> String {
    let mut bytes = Vec::new();
    for (tag, frames) in [(b'T', train), (b'E', eval)] {
        for f in frames {
            bytes.push(tag);
            bytes.extend_from_slice(&f.frame_id.to_le_bytes());
            bytes.extend_from_slice(&encode_cloud(&f.lidar));
            bytes.extend_from_slice(&encode_cloud(&f.radar));
            bytes.extend_from_slice(format_labels(&f.annotations()).as_bytes());
        }
    }
    short_hash(&bytes)
}

/// Raw train/eval frames: read from `data.dir` when set, otherwise simulated
/// from the run seed.
pub fn load_frames(cfg: &RunConfig) -> Result<(Vec<SceneFrame>, Vec<SceneFrame>)> {
    let (nt, ne) = (cfg.data.train_frames, cfg.data.eval_frames);
    match &cfg.data.dir {
        Some(dir) => {
            let m = read_manifest(dir)?;
            if m.frames.len() < nt + ne {
                return Err(Error::Config(format!(
                    "{}: {} frames available, config needs {}",
                    dir.display(),
                    m.frames.len(),
                    nt + ne
                )));
            }
            let read = |ids: &[u64]| {
                ids.par_iter().map(|&id| read_frame(dir, id, &cfg.eval.corridor)).collect::<Result<Vec<_>>>()
            };
            Ok((read(&m.frames[..nt])?, read(&m.frames[nt..nt + ne])?))
        }
        None => {
            let mut all = gen_frames(cfg.seed, 0, nt + ne, &cfg.sim)?;
            let eval = all.split_off(nt);
            Ok((all, eval))
        }
    }
}

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let (train, eval) = load_frames(cfg)?;
    let split_hash = frames_digest(&train, &eval);
    let prep =
        |frames: &[SceneFrame]| frames.par_iter().map(|f| prepare_frame(f, &cfg.model)).collect::<Result<Vec<_>>>();
    Ok(Dataset { train: prep(&train)?, eval: prep(&eval)?, split_hash })
}

pub fn init_model(cfg: &RunConfig) -> Result<(Detector, ParamStore)> {
    Detector::new(&cfg.model, frame_seed(cfg.seed, INIT_STREAM))
}

/// Mean loss terms over one epoch, evaluated before each step's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub lidar: f64,
    pub radar: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub motion: Option<f64>,
    /// Mean number of matched LiDAR/radar box pairs per frame.
    pub matched: f64,
    /// Largest pre-clip gradient norm seen in the epoch.
    pub max_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub detector: Detector,
    pub params: ParamStore,
    pub adam: AdamState,
    pub history: Vec<EpochLog>,
}

struct FrameStep {
    total: f64,
    lidar: f64,
    radar: f64,
    motion: Option<f64>,
    matched: usize,
    grads: Vec<Tensor>,
}

fn frame_step(
    det: &Detector,
    params: &ParamStore,
    frame: &PreparedFrame,
    cfg: &RunConfig,
    epoch: usize,
) -> Result<FrameStep> {
    let mut tape = Tape::new();
    let (terms, _) = det.loss(&mut tape, params, frame, &cfg.loss_settings())?;
    let value = |v| tape.value(v).item();
    let step = FrameStep {
        total: value(terms.total),
        lidar: value(terms.lidar),
        radar: value(terms.radar),
        motion: terms.motion.map(value),
        matched: terms.matched,
        grads: Vec::new(),
    };
    for (name, v) in
        [("lidar", Some(step.lidar)), ("radar", Some(step.radar)), ("motion", step.motion), ("total", Some(step.total))]
    {
        if v.is_some_and(|v| !v.is_finite()) {
            return Err(Error::NanLoss { term: name.into(), epoch });
        }
    }
    let grads = tape.backward(terms.total)?.param_grads(params);
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NanLoss { term: "gradient".into(), epoch });
    }
    Ok(FrameStep { grads, ..step })
}

/// Trains from the seeded initialization. When `checkpoint` is given the
/// latest state is written there after every epoch.
pub fn train(cfg: &RunConfig, data: &[PreparedFrame], checkpoint: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let hash = cfg.hash()?;
    let (detector, mut params) = init_model(cfg)?;
    let mut adam = AdamState::new(&params);
    let mut history = Vec::with_capacity(cfg.train.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(cfg.seed, SHUFFLE_STREAM + epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut matched = 0usize;
        let mut max_norm: f64 = 0.0;
        for batch in order.chunks(cfg.train.batch_size) {
            let steps = batch
                .par_iter()
                .map(|&i| frame_step(&detector, &params, &data[i], cfg, epoch))
                .collect::<Result<Vec<_>>>()?;
            // fixed-order reduction keeps results independent of thread count
            let mut grads: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
            let inv = 1.0 / batch.len() as f64;
            for s in &steps {
                for (g, sg) in grads.iter_mut().zip(&s.grads) {
                    for (a, b) in g.data_mut().iter_mut().zip(sg.data()) {
                        *a += b * inv;
                    }
                }
                sums[0] += s.total;
                sums[1] += s.lidar;
                sums[2] += s.radar;
                sums[3] += s.motion.unwrap_or(0.0);
                matched += s.matched;
            }
            max_norm = max_norm.max(clip_grad_norm(&mut grads, cfg.train.clip_norm));
            optimizer_step(&mut params, &grads, &mut adam, &cfg.train.adam)?;
        }
        let n = data.len() as f64;
        history.push(EpochLog {
            epoch,
            total: sums[0] / n,
            lidar: sums[1] / n,
            radar: sums[2] / n,
            motion: cfg.dmae.enabled.then_some(sums[3] / n),
            matched: matched as f64 / n,
            max_grad_norm: max_norm,
        });
        if let Some(path) = checkpoint {
            Checkpoint { config_hash: hash.clone(), epoch, params: params.clone(), adam: adam.clone() }.save(path)?;
        }
    }
    Ok(TrainOutcome { detector, params, adam, history })
}

/// Point-level moving/static accuracy on the radar branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionMetrics {
    /// Radar keypoints scored, summed over the four stages.
    pub keypoints: usize,
    /// Learned motion head, threshold 0.5, on those keypoints.
    pub dmae_accuracy: f64,
    /// `v_abs > threshold` on the same keypoints.
    pub threshold_accuracy_keypoints: f64,
    /// `v_abs > threshold` on every radar point of the eval clouds.
    pub threshold_accuracy_cloud: f64,
    pub cloud_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub report: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub motion: Option<MotionMetrics>,
}

/// Naive `v_abs > threshold` accuracy over every unpadded radar point.
pub fn threshold_cloud_accuracy(frames: &[PreparedFrame], threshold: f64) -> (f64, usize) {
    let mut correct = 0usize;
    let mut total = 0usize;
    for f in frames {
        let vel = f.radar.velocity.as_deref().unwrap_or(&[]);
        for (v, &y) in vel.iter().zip(&f.radar_labels).take(f.radar_len) {
            correct += usize::from((v[1] > threshold) == (y == 1));
            total += 1;
        }
    }
    (if total == 0 { 0.0 } else { correct as f64 / total as f64 }, total)
}

pub fn evaluate_model(
    detector: &Detector,
    params: &ParamStore,
    frames: &[PreparedFrame],
    cfg: &RunConfig,
) -> Result<ModelEval> {
    let preds = frames.par_iter().map(|f| detector.predict(params, f, cfg.dmae.enabled)).collect::<Result<Vec<_>>>()?;
    let results: Vec<FrameResult> = preds
        .iter()
        .zip(frames)
        .map(|(p, f)| FrameResult {
            detections: p.boxes.iter().map(Detection::from).collect(),
            ground_truth: f.annotations.clone(),
        })
        .collect();
    let report = evaluate(&results, &cfg.eval, &cfg.hash()?, cfg.seed);
    let motion = if cfg.dmae.enabled {
        let thr = cfg.eval.motion_threshold;
        let (mut n, mut ok_dmae, mut ok_thr) = (0usize, 0usize, 0usize);
        for p in &preds {
            for m in &p.motion {
                for ((&y_hat, &y), &v) in m.y_hat.iter().zip(&m.labels).zip(&m.v_abs) {
                    n += 1;
                    ok_dmae += usize::from((y_hat >= 0.5) == (y == 1));
                    ok_thr += usize::from((v > thr) == (y == 1));
                }
            }
        }
        let (cloud_acc, cloud_points) = threshold_cloud_accuracy(frames, thr);
        Some(MotionMetrics {
            keypoints: n,
            dmae_accuracy: ok_dmae as f64 / n.max(1) as f64,
            threshold_accuracy_keypoints: ok_thr as f64 / n.max(1) as f64,
            threshold_accuracy_cloud: cloud_acc,
            cloud_points,
        })
    } else {
        None
    };
    Ok(ModelEval { report, motion })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::StageConfig;
    use crate::heads::HeadConfig;
    use crate::model::ModelConfig;

    pub(crate) fn tiny_config() -> RunConfig {
        let st = |m: [usize; 4], r: f64| -> Vec<StageConfig> {
            (0..4)
                .map(|i| StageConfig {
                    num_keypoints: m[i],
                    ball_radius: r * (1 << i) as f64,
                    max_neighbors: 6,
                    mlp_widths: vec![8],
                })
                .collect()
        };
        let mut c = RunConfig {
            model: ModelConfig {
                lidar_stages: st([32, 16, 8, 6], 1.0),
                radar_stages: st([16, 12, 8, 6], 2.0),
                shared_width: 8,
                head: HeadConfig { hidden: 8, ..Default::default() },
                ..Default::default()
            },
            ..Default::default()
        };
        c.data.train_frames = 4;
        c.data.eval_frames = 2;
        c.train.epochs = 2;
        c.train.batch_size = 2;
        c
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let data = build_dataset(&cfg).unwrap();
        let a = train(&cfg, &data.train, None).unwrap();
        let b = train(&cfg, &data.train, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 2);
        assert_eq!(build_dataset(&cfg).unwrap().split_hash, data.split_hash);
    }

    #[test]
    fn evaluation_reports_motion_only_with_dmae() {
        let mut cfg = tiny_config();
        let data = build_dataset(&cfg).unwrap();
        let (det, params) = init_model(&cfg).unwrap();
        let e = evaluate_model(&det, &params, &data.eval, &cfg).unwrap();
        let m = e.motion.unwrap();
        assert_eq!(m.keypoints, 2 * (16 + 12 + 8 + 6));
        cfg.dmae.enabled = false;
        assert!(evaluate_model(&det, &params, &data.eval, &cfg).unwrap().motion.is_none());
    }

    #[test]
    fn checkpoint_written_each_epoch() {
        let cfg = tiny_config();
        let data = build_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let out = train(&cfg, &data.train, Some(&path)).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.epoch, 2);
        assert_eq!(ck.params, out.params);
        assert_eq!(ck.config_hash, cfg.hash().unwrap());
    }
}
