//! The two-branch detector: LiDAR and radar encoders, per-stage motion
//! modules on the radar branch, a late fusion step and two box heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::backbone::{
    encode_cloud_with, farthest_point_sample, validate_stages, Cloud, EncoderParams, FpsSeed, StageConfig, StageOutput,
};
use crate::dmae::{dmae_forward, label_point_motion, motion_loss_layer, motion_loss_total, DmaeConfig, DmaeParams};
use crate::error::{Error, Result};
use crate::heads::{
    assign_targets, decode_predictions, decode_rows_var, detection_loss, filter_predictions, head_forward,
    BoxPrediction, HeadConfig, HeadParams,
};
use crate::nn::Linear;
use crate::scene::{Annotation, LidarPoint, SceneFrame};
use crate::xua::{aligned_lidar_loss, delta_d_var, match_boxes, XuaConfig};

pub const LIDAR_FEATURES: usize = 1;
pub const RADAR_FEATURES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lidar_stages: Vec<StageConfig>,
    pub radar_stages: Vec<StageConfig>,
    /// Width both branches are projected to before fusion.
    pub shared_width: usize,
    /// A LiDAR keypoint takes the radar feature of its nearest radar
    /// keypoint only within this BEV-plus-height distance.
    pub fusion_radius: f64,
    /// LiDAR returns below `ground + ground_clip` are treated as ground.
    pub ground_clip: f64,
    pub sensor_height: f64,
    /// Divisor applied to velocities before they enter the network.
    pub velocity_scale: f64,
    pub rcs_scale: f64,
    pub fps_seed: FpsSeed,
    pub head: HeadConfig,
}

fn stages(m: [usize; 4], radius: [f64; 4], k: usize, widths: [&[usize]; 4]) -> Vec<StageConfig> {
    (0..4)
        .map(|i| StageConfig {
            num_keypoints: m[i],
            ball_radius: radius[i],
            max_neighbors: k,
            mlp_widths: widths[i].to_vec(),
        })
        .collect()
}

impl Default for ModelConfig {
    fn default() -> Self {
        let widths: [&[usize]; 4] = [&[16, 32], &[32, 64], &[64, 128], &[128, 256]];
        Self {
            lidar_stages: stages([256, 128, 64, 32], [0.8, 1.6, 3.2, 6.4], 16, widths),
            radar_stages: stages([96, 48, 24, 16], [1.5, 3.0, 6.0, 12.0], 16, widths),
            shared_width: 64,
            fusion_radius: 3.0,
            ground_clip: 0.2,
            sensor_height: 1.7,
            velocity_scale: 5.0,
            rcs_scale: 10.0,
            fps_seed: FpsSeed::First,
            head: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        validate_stages(&self.lidar_stages).map_err(|e| Error::Config(format!("lidar_stages: {e}")))?;
        validate_stages(&self.radar_stages).map_err(|e| Error::Config(format!("radar_stages: {e}")))?;
        if self.shared_width == 0 {
            return Err(Error::Config("model.shared_width must be positive".into()));
        }
        for (name, v) in [
            ("fusion_radius", self.fusion_radius),
            ("velocity_scale", self.velocity_scale),
            ("rcs_scale", self.rcs_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("model.{name} = {v} must be positive")));
            }
        }
        if !(self.ground_clip >= 0.0) {
            return Err(Error::Config("model.ground_clip must be >= 0".into()));
        }
        self.head.validate()
    }
}

/// Network inputs and supervision derived from one frame. Independent of
/// the weights, so it is computed once per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedFrame {
    pub frame_id: u64,
    pub lidar: Cloud,
    pub radar: Cloud,
    /// Motion label of every radar cloud point.
    pub radar_labels: Vec<u8>,
    /// Radar points before padding; padded copies follow them.
    pub radar_len: usize,
    pub annotations: Vec<Annotation>,
}

/// Repeats points cyclically until there are at least `min` of them.
fn pad_cyclic<T: Clone>(v: &mut Vec<T>, min: usize) {
    let n = v.len();
    if n == 0 {
        return;
    }
    let mut i = 0;
    while v.len() < min {
        v.push(v[i % n].clone());
        i += 1;
    }
}

pub fn prepare_frame(frame: &SceneFrame, cfg: &ModelConfig) -> Result<PreparedFrame> {
    let annotations = frame.annotations();
    let m1l = cfg.lidar_stages[0].num_keypoints;
    let m1r = cfg.radar_stages[0].num_keypoints;
    let clip = -cfg.sensor_height + cfg.ground_clip;

    let (mut above, ground): (Vec<LidarPoint>, Vec<LidarPoint>) = frame.lidar.iter().copied().partition(|p| p.z > clip);
    if above.len() < m1l && !ground.is_empty() {
        let gxyz: Vec<[f64; 3]> = ground.iter().map(|p| [p.x, p.y, p.z]).collect();
        let take = (m1l - above.len()).min(gxyz.len());
        for i in farthest_point_sample(&gxyz, take, 0)? {
            above.push(ground[i]);
        }
    }
    pad_cyclic(&mut above, m1l);
    if above.is_empty() {
        return Err(Error::Invalid(format!("frame {}: empty LiDAR cloud", frame.frame_id)));
    }
    let lidar = Cloud {
        xyz: above.iter().map(|p| [p.x, p.y, p.z]).collect(),
        features: Tensor::matrix(above.len(), LIDAR_FEATURES, above.iter().map(|p| p.intensity).collect())?,
        velocity: None,
    };

    let radar_len = frame.radar.len();
    let mut radar_pts = frame.radar.clone();
    pad_cyclic(&mut radar_pts, m1r);
    if radar_pts.is_empty() {
        return Err(Error::Invalid(format!("frame {}: empty radar cloud", frame.frame_id)));
    }
    let vs = cfg.velocity_scale;
    let radar = Cloud {
        xyz: radar_pts.iter().map(|p| [p.x, p.y, p.z]).collect(),
        features: Tensor::matrix(
            radar_pts.len(),
            RADAR_FEATURES,
            radar_pts.iter().flat_map(|p| [p.v_rel / vs, p.v_abs / vs, p.rcs / cfg.rcs_scale]).collect(),
        )?,
        velocity: Some(radar_pts.iter().map(|p| [p.v_rel, p.v_abs]).collect()),
    };
    let radar_labels = label_point_motion(&radar.xyz, &annotations);
    Ok(PreparedFrame { frame_id: frame.frame_id, lidar, radar, radar_labels, radar_len, annotations })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub lidar_enc: EncoderParams,
    pub radar_enc: EncoderParams,
    pub dmae: Vec<DmaeParams>,
    pub proj_lidar: Linear,
    pub proj_radar: Linear,
    pub head_lidar: HeadParams,
    pub head_radar: HeadParams,
}

/// Per-stage motion predictions of the radar branch.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionStage {
    pub y_hat: Var,
    pub labels: Vec<u8>,
    /// `v_abs` of each keypoint, for the threshold baseline.
    pub v_abs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub lidar_raw: Var,
    pub radar_raw: Var,
    pub lidar_keypoints: Vec<[f64; 3]>,
    pub radar_keypoints: Vec<[f64; 3]>,
    pub motion: Vec<MotionStage>,
}

/// Keypoint rows and class anchors of matched LiDAR/radar predictions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct XuaPlan {
    pub rows_lidar: Vec<usize>,
    pub rows_radar: Vec<usize>,
    pub anchors_lidar: Vec<[f64; 3]>,
    pub anchors_radar: Vec<[f64; 3]>,
}

/// Which modules take part in a pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub dmae: DmaeConfig,
    pub xua: XuaConfig,
    pub radar_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: Var,
    /// LiDAR detection loss, uncertainty-weighted when X-UA is on.
    pub lidar: Var,
    pub radar: Var,
    pub motion: Option<Var>,
    pub matched: usize,
}

impl Detector {
    /// Builds the network and its freshly initialized weights. The motion
    /// modules are always allocated so every configuration starts from the
    /// same weights.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lidar_enc = EncoderParams::init(&mut store, "lidar", LIDAR_FEATURES, &cfg.lidar_stages, &mut rng)?;
        let radar_enc = EncoderParams::init(&mut store, "radar", RADAR_FEATURES, &cfg.radar_stages, &mut rng)?;
        let dmae = cfg
            .radar_stages
            .iter()
            .enumerate()
            .map(|(i, s)| DmaeParams::init(&mut store, &format!("dmae{i}"), s.out_width(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let nl = cfg.lidar_stages[3].out_width();
        let nr = cfg.radar_stages[3].out_width();
        let proj_lidar = Linear::init(&mut store, "proj_lidar", nl, cfg.shared_width, &mut rng);
        let proj_radar = Linear::init(&mut store, "proj_radar", nr, cfg.shared_width, &mut rng);
        let head_lidar = HeadParams::init(&mut store, "head_lidar", cfg.shared_width, cfg.head.hidden, &mut rng)?;
        let head_radar = HeadParams::init(&mut store, "head_radar", cfg.shared_width, cfg.head.hidden, &mut rng)?;
        Ok((
            Self { cfg: cfg.clone(), lidar_enc, radar_enc, dmae, proj_lidar, proj_radar, head_lidar, head_radar },
            store,
        ))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frame: &PreparedFrame,
        use_dmae: bool,
    ) -> Result<ForwardPass> {
        let cfg = &self.cfg;
        let lidar = encode_cloud_with(
            tape,
            store,
            &frame.lidar,
            &cfg.lidar_stages,
            &self.lidar_enc,
            cfg.fps_seed,
            |_, _, _| Ok(None),
        )?;
        let mut motion = Vec::new();
        let radar = encode_cloud_with(
            tape,
            store,
            &frame.radar,
            &cfg.radar_stages,
            &self.radar_enc,
            cfg.fps_seed,
            |tape, i, out: &StageOutput| {
                if !use_dmae {
                    return Ok(None);
                }
                let vel = out.velocity.as_ref().ok_or_else(|| Error::Invalid("radar cloud without velocity".into()))?;
                let v = tape.constant(Tensor::matrix(
                    vel.len(),
                    2,
                    vel.iter().flat_map(|v| [v[0] / cfg.velocity_scale, v[1] / cfg.velocity_scale]).collect(),
                )?)?;
                let m = dmae_forward(tape, store, out.features, v, &self.dmae[i])?;
                motion.push(MotionStage {
                    y_hat: m.y_hat,
                    labels: out.source.iter().map(|&s| frame.radar_labels[s]).collect(),
                    v_abs: vel.iter().map(|v| v[1]).collect(),
                });
                Ok(Some(m.enhanced))
            },
        )?;
        let l4 = &lidar[3];
        let r4 = &radar[3];

        let pl = self.proj_lidar.forward(tape, store, l4.features)?;
        let pr = self.proj_radar.forward(tape, store, r4.features)?;
        let r2 = cfg.fusion_radius * cfg.fusion_radius;
        let mut nearest = Vec::with_capacity(l4.keypoints.len());
        let mut mask = Vec::with_capacity(l4.keypoints.len());
        for k in &l4.keypoints {
            let (d, j) = r4
                .keypoints
                .iter()
                .enumerate()
                .map(|(j, r)| ((k[0] - r[0]).powi(2) + (k[1] - r[1]).powi(2) + (k[2] - r[2]).powi(2), j))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .unwrap_or((f64::INFINITY, 0));
            nearest.push(j);
            mask.push(if d <= r2 { 1.0 } else { 0.0 });
        }
        let gathered = tape.gather_rows(pr, &nearest)?;
        let mask = tape.constant(Tensor::column(mask)?)?;
        let gathered = tape.mul_col(gathered, mask)?;
        let fused = tape.add(pl, gathered)?;
        let fused = tape.relu(fused)?;
        let radar_feat = tape.relu(pr)?;

        let lidar_raw = head_forward(tape, store, fused, &self.head_lidar)?;
        let radar_raw = head_forward(tape, store, radar_feat, &self.head_radar)?;
        Ok(ForwardPass {
            lidar_raw,
            radar_raw,
            lidar_keypoints: l4.keypoints.clone(),
            radar_keypoints: r4.keypoints.clone(),
            motion,
        })
    }

    /// Training objective for one frame.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frame: &PreparedFrame,
        s: &LossSettings,
    ) -> Result<(LossTerms, ForwardPass)> {
        self.loss_with_plan(tape, store, frame, s, None)
    }

    /// Matched LiDAR/radar rows for the alignment term, chosen from the
    /// current head outputs.
    pub fn xua_plan(&self, tape: &Tape, fp: &ForwardPass, gate: Option<f64>) -> Result<XuaPlan> {
        let head = &self.cfg.head;
        let dl = filter_predictions(&decode_predictions(tape.value(fp.lidar_raw), &fp.lidar_keypoints, head)?, head);
        let dr = filter_predictions(&decode_predictions(tape.value(fp.radar_raw), &fp.radar_keypoints, head)?, head);
        let lb: Vec<_> = dl.iter().map(|p| p.bbox).collect();
        let rb: Vec<_> = dr.iter().map(|p| p.bbox).collect();
        let pairs = match_boxes(&lb, &rb, gate)?.pairs;
        Ok(XuaPlan {
            rows_lidar: pairs.iter().map(|&(i, _)| dl[i].keypoint).collect(),
            rows_radar: pairs.iter().map(|&(_, j)| dr[j].keypoint).collect(),
            anchors_lidar: pairs.iter().map(|&(i, _)| head.anchor(dl[i].class())).collect(),
            anchors_radar: pairs.iter().map(|&(_, j)| head.anchor(dr[j].class())).collect(),
        })
    }

    /// [`Detector::loss`] with the matched pairs fixed in advance. With
    /// `None` the pairs are chosen from this forward pass.
    pub fn loss_with_plan(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frame: &PreparedFrame,
        s: &LossSettings,
        plan: Option<&XuaPlan>,
    ) -> Result<(LossTerms, ForwardPass)> {
        let head = &self.cfg.head;
        let fp = self.forward(tape, store, frame, s.dmae.enabled)?;
        let tl = assign_targets(&fp.lidar_keypoints, &frame.annotations, head);
        let tr = assign_targets(&fp.radar_keypoints, &frame.annotations, head);
        let det_l = detection_loss(tape, fp.lidar_raw, &tl, head)?;
        let det_r = detection_loss(tape, fp.radar_raw, &tr, head)?;

        let mut matched = 0;
        let lidar = if s.xua.enabled {
            let own;
            let plan = match plan {
                Some(p) => p,
                None => {
                    own = self.xua_plan(tape, &fp, s.xua.gate)?;
                    &own
                }
            };
            matched = plan.rows_lidar.len();
            if matched == 0 {
                det_l.total
            } else {
                let bl =
                    decode_rows_var(tape, fp.lidar_raw, &plan.rows_lidar, &fp.lidar_keypoints, &plan.anchors_lidar)?;
                let br =
                    decode_rows_var(tape, fp.radar_raw, &plan.rows_radar, &fp.radar_keypoints, &plan.anchors_radar)?;
                let delta = delta_d_var(tape, bl, br)?;
                aligned_lidar_loss(tape, &det_l, &plan.rows_lidar, delta, s.xua.lambda)?
            }
        } else {
            det_l.total
        };

        let radar = det_r.total;
        let weighted_radar = tape.scale(radar, s.radar_weight)?;
        let mut total = tape.add(lidar, weighted_radar)?;
        let motion = if s.dmae.enabled {
            let layers = fp
                .motion
                .iter()
                .map(|m| motion_loss_layer(tape, m.y_hat, &m.labels, s.dmae.alpha, s.dmae.gamma))
                .collect::<Result<Vec<_>>>()?;
            let m = motion_loss_total(tape, &layers)?;
            let w = tape.scale(m, s.dmae.weight)?;
            total = tape.add(total, w)?;
            Some(m)
        } else {
            None
        };
        Ok((LossTerms { total, lidar, radar, motion, matched }, fp))
    }

    /// Final LiDAR-head detections plus motion outputs.
    pub fn predict(&self, store: &ParamStore, frame: &PreparedFrame, use_dmae: bool) -> Result<Prediction> {
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, store, frame, use_dmae)?;
        let head = &self.cfg.head;
        let boxes = filter_predictions(&decode_predictions(tape.value(fp.lidar_raw), &fp.lidar_keypoints, head)?, head);
        let motion = fp
            .motion
            .iter()
            .map(|m| MotionOutcome {
                y_hat: tape.value(m.y_hat).data().to_vec(),
                labels: m.labels.clone(),
                v_abs: m.v_abs.clone(),
            })
            .collect();
        Ok(Prediction { boxes, motion })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionOutcome {
    pub y_hat: Vec<f64>,
    pub labels: Vec<u8>,
    pub v_abs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub boxes: Vec<BoxPrediction>,
    /// One entry per radar stage when the motion modules ran.
    pub motion: Vec<MotionOutcome>,
}
