//! Finite-difference checks over every differentiable building block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, grad_check_params, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::backbone::{encode_cloud, EncoderParams, StageConfig};
use crate::dmae::{dmae_forward, motion_loss_layer, motion_loss_total, DmaeConfig, DmaeParams};
use crate::error::Result;
use crate::geom::Box7;
use crate::heads::{assign_targets, detection_loss, head_forward, HeadConfig, HeadParams, HEAD_OUT};
use crate::model::{prepare_frame, Detector, LossSettings, ModelConfig, RADAR_FEATURES};
use crate::scene::{Annotation, ObjectClass};
use crate::sim::{gen_scene, SceneConfig};
use crate::xua::{aligned_lidar_loss, delta_d_var, uncertainty_loss, XuaConfig};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

/// Entries at least `gap` away from zero so no probe straddles a kink.
fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, gap: f64) -> Tensor {
    let data = (0..r * c)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(r, c, data).expect("sized")
}

fn rand_pos(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(0.2..2.0)).collect()).expect("sized")
}

/// Fixed random weighted sum, to reduce any output to a scalar.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?)?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

struct Suite {
    step: f64,
    tol: f64,
    out: Vec<CheckOutcome>,
}

impl Suite {
    fn record(&mut self, name: &str, rep: Result<GradCheckReport>) {
        let (err, coords) = match rep {
            Ok(r) => (r.max_rel_error, r.coordinates),
            Err(_) => (f64::INFINITY, 0),
        };
        self.out.push(CheckOutcome {
            name: name.to_string(),
            max_rel_error: err,
            coordinates: coords,
            passed: err < self.tol,
        });
    }

    fn inputs(&mut self, name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
        let rep = grad_check(f, inputs, self.step);
        self.record(name, rep);
    }

    fn params(&mut self, name: &str, store: &ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Result<Var>) {
        let rep = grad_check_params(f, store, self.step);
        self.record(name, rep);
    }
}

fn primitives(s: &mut Suite, rng: &mut ChaCha8Rng) {
    let (m, k, n) = (5, 4, 3);
    let a = rand_mat(rng, m, k, 0.05);
    let b = rand_mat(rng, k, n, 0.05);
    let c = rand_mat(rng, m, k, 0.05);
    let pos = rand_pos(rng, m, k);
    let row = rand_mat(rng, 1, k, 0.0);
    let col = rand_mat(rng, m, 1, 0.0);
    let bias = rand_mat(rng, 1, n, 0.0);
    let idx = [0usize, 3, 3, 1, 4, 2, 0];

    s.inputs("matmul", &[a.clone(), b.clone()], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 1)
    });
    s.inputs("transpose", std::slice::from_ref(&a), |t, v| {
        let y = t.transpose(v[0])?;
        project(t, y, 2)
    });
    s.inputs("linear", &[a.clone(), b.clone(), bias], |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        project(t, y, 3)
    });
    s.inputs("add", &[a.clone(), c.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 4)
    });
    s.inputs("sub", &[a.clone(), c.clone()], |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, 5)
    });
    s.inputs("mul", &[a.clone(), c.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 6)
    });
    s.inputs("add_row", &[a.clone(), row], |t, v| {
        let y = t.add_row(v[0], v[1])?;
        project(t, y, 7)
    });
    s.inputs("mul_col", &[a.clone(), col], |t, v| {
        let y = t.mul_col(v[0], v[1])?;
        project(t, y, 8)
    });
    s.inputs("scale", std::slice::from_ref(&a), |t, v| {
        let y = t.scale(v[0], -1.7)?;
        project(t, y, 9)
    });
    s.inputs("offset", std::slice::from_ref(&a), |t, v| {
        let y = t.offset(v[0], 0.3)?;
        project(t, y, 10)
    });
    s.inputs("exp", std::slice::from_ref(&a), |t, v| {
        let y = t.exp(v[0])?;
        project(t, y, 11)
    });
    s.inputs("log", std::slice::from_ref(&pos), |t, v| {
        let y = t.log(v[0])?;
        project(t, y, 12)
    });
    s.inputs("sigmoid", std::slice::from_ref(&a), |t, v| {
        let y = t.sigmoid(v[0])?;
        project(t, y, 13)
    });
    s.inputs("relu", std::slice::from_ref(&a), |t, v| {
        let y = t.relu(v[0])?;
        project(t, y, 14)
    });
    s.inputs("abs", std::slice::from_ref(&a), |t, v| {
        let y = t.abs(v[0])?;
        project(t, y, 15)
    });
    s.inputs("powf", &[pos], |t, v| {
        let y = t.powf(v[0], 2.5)?;
        project(t, y, 16)
    });
    s.inputs("clamp", std::slice::from_ref(&a), |t, v| {
        let y = t.clamp(v[0], -0.5, 0.5)?;
        project(t, y, 17)
    });
    s.inputs("smooth_l1", std::slice::from_ref(&a), |t, v| {
        let y = t.smooth_l1(v[0], 0.5)?;
        project(t, y, 18)
    });
    s.inputs("atan2", &[a.clone(), c.clone()], |t, v| {
        let y = t.atan2(v[0], v[1])?;
        project(t, y, 19)
    });
    s.inputs("wrap_angle", std::slice::from_ref(&a), |t, v| {
        let y = t.wrap_angle(v[0])?;
        project(t, y, 20)
    });
    s.inputs("softmax_rows", std::slice::from_ref(&a), |t, v| {
        let y = t.softmax_rows(v[0], 1.7)?;
        project(t, y, 21)
    });
    s.inputs("sum", std::slice::from_ref(&a), |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.sum(y)
    });
    s.inputs("mean", std::slice::from_ref(&a), |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.mean(y)
    });
    s.inputs("concat_cols", &[a.clone(), c.clone()], |t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        project(t, y, 22)
    });
    s.inputs("concat_rows", &[a.clone(), c.clone()], |t, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        project(t, y, 23)
    });
    s.inputs("gather_rows", std::slice::from_ref(&a), |t, v| {
        let y = t.gather_rows(v[0], &idx)?;
        project(t, y, 24)
    });
    s.inputs("slice_cols", &[a], |t, v| {
        let y = t.slice_cols(v[0], 1, 3)?;
        project(t, y, 25)
    });
    // distinct values per group keep the argmax fixed under probing
    let grouped = Tensor::matrix(12, 3, (0..36).map(|i| ((i * 7919) % 1009) as f64 * 0.01).collect()).expect("sized");
    s.inputs("max_over_set", &[grouped], |t, v| {
        let y = t.max_over_set(v[0], 3)?;
        project(t, y, 26)
    });
}

fn motion(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let width = 6;
    let mut store = ParamStore::new();
    let p = DmaeParams::init(&mut store, "dmae", width, rng)?;
    let f = rand_mat(rng, 8, width, 0.0);
    let v = rand_mat(rng, 8, 2, 0.0);
    let labels: Vec<u8> = (0..8).map(|i| u8::from(i % 3 == 0)).collect();
    s.params("dmae_forward", &store, |t, st| {
        let fv = t.constant(f.clone())?;
        let vv = t.constant(v.clone())?;
        let o = dmae_forward(t, st, fv, vv, &p)?;
        let a = project(t, o.enhanced, 30)?;
        let b = project(t, o.y_hat, 31)?;
        t.add(a, b)
    });
    // inputs join the parameter store so one tape sees a single store
    let mut with_inputs = store.clone();
    let fid = with_inputs.add("f", f.clone());
    let vid = with_inputs.add("v", v.clone());
    s.params("dmae_forward_inputs", &with_inputs, |t, st| {
        let fv = t.param(st, fid)?;
        let vv = t.param(st, vid)?;
        let o = dmae_forward(t, st, fv, vv, &p)?;
        project(t, o.enhanced, 32)
    });
    s.params("motion_loss_layer", &store, |t, st| {
        let fv = t.constant(f.clone())?;
        let vv = t.constant(v.clone())?;
        let o = dmae_forward(t, st, fv, vv, &p)?;
        motion_loss_layer(t, o.y_hat, &labels, 0.25, 2.0)
    });
    let probs: Vec<Tensor> = (0..4)
        .map(|i| Tensor::matrix(3 + i, 1, (0..3 + i).map(|_| rng.random_range(0.05..0.95)).collect()))
        .collect::<Result<_>>()?;
    let layer_labels: Vec<Vec<u8>> =
        probs.iter().map(|p| (0..p.rows()).map(|j| u8::from(j % 2 == 0)).collect()).collect();
    s.inputs("motion_loss_total", &probs, |t, x| {
        let layers = x
            .iter()
            .zip(&layer_labels)
            .map(|(&y, l)| motion_loss_layer(t, y, l, 0.25, 2.0))
            .collect::<Result<Vec<_>>>()?;
        motion_loss_total(t, &layers)
    });
    Ok(())
}

fn detection_case(rng: &mut ChaCha8Rng, n: usize) -> Result<(Vec<[f64; 3]>, Vec<Annotation>)> {
    let kps: Vec<[f64; 3]> =
        (0..n).map(|i| [2.0 * i as f64 + rng.random_range(-0.3..0.3), rng.random_range(-0.5..0.5), -0.8]).collect();
    let anns = vec![
        Annotation { class: ObjectClass::Car, bbox: Box7::new(2.2, 0.1, -0.9, 4.0, 1.8, 1.6, 0.3)?, moving: true },
        Annotation {
            class: ObjectClass::Pedestrian,
            bbox: Box7::new(8.1, 0.0, -0.8, 0.6, 0.6, 1.7, -1.0)?,
            moving: false,
        },
        Annotation { class: ObjectClass::Cyclist, bbox: Box7::new(12.0, 0.2, -0.8, 1.8, 0.6, 1.7, 2.0)?, moving: true },
    ];
    Ok((kps, anns))
}

fn detection(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let cfg = HeadConfig { hidden: 8, ..Default::default() };
    let mut store = ParamStore::new();
    let head = HeadParams::init(&mut store, "head", 5, cfg.hidden, rng)?;
    let feats = rand_mat(rng, 8, 5, 0.0);
    let (kps, anns) = detection_case(rng, 8)?;
    let targets = assign_targets(&kps, &anns, &cfg);
    s.params("detection_loss", &store, |t, st| {
        let x = t.constant(feats.clone())?;
        let raw = head_forward(t, st, x, &head)?;
        Ok(detection_loss(t, raw, &targets, &cfg)?.total)
    });
    let raw = Tensor::matrix(8, HEAD_OUT, (0..8 * HEAD_OUT).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    s.inputs("detection_loss_raw", &[raw], |t, x| Ok(detection_loss(t, x[0], &targets, &cfg)?.total));
    Ok(())
}

fn uncertainty(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let per_pair = rand_pos(rng, 4, 7);
    let l = rand_mat(rng, 4, 7, 0.2);
    let r = rand_mat(rng, 4, 7, 0.2);
    // keep every |l - r| well away from zero
    let r = Tensor::matrix(4, 7, l.data().iter().zip(r.data()).map(|(a, b)| a + 0.3 * b.signum() + 0.2 * b).collect())?;
    s.inputs("uncertainty_loss", &[per_pair, l.clone(), r.clone()], |t, x| {
        let d = delta_d_var(t, x[1], x[2])?;
        uncertainty_loss(t, x[0], d, 0.1)
    });

    let cfg = HeadConfig::default();
    let (kps, anns) = detection_case(rng, 6)?;
    let targets = assign_targets(&kps, &anns, &cfg);
    let raw = Tensor::matrix(6, HEAD_OUT, (0..6 * HEAD_OUT).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let rows = [0usize, 3, 5];
    let ld = Tensor::matrix(3, 7, l.data()[..21].to_vec())?;
    let rd = Tensor::matrix(3, 7, r.data()[..21].to_vec())?;
    s.inputs("aligned_lidar_loss", &[raw, ld, rd], |t, x| {
        let det = detection_loss(t, x[0], &targets, &cfg)?;
        let d = delta_d_var(t, x[1], x[2])?;
        aligned_lidar_loss(t, &det, &rows, d, 0.1)
    });
    Ok(())
}

fn tiny_stages(m: [usize; 4], radius: f64) -> Vec<StageConfig> {
    (0..4)
        .map(|i| StageConfig {
            num_keypoints: m[i],
            ball_radius: radius * (1 << i) as f64,
            max_neighbors: 4,
            mlp_widths: vec![4],
        })
        .collect()
}

/// Zero biases put ReLU inputs exactly on the kink wherever a layer sees
/// all-zero inputs; give every bias a value away from zero.
fn offset_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().filter(|&i| store.name(i).ends_with(".bias")).collect();
    for id in ids {
        for b in store.get_mut(id).data_mut() {
            *b = rng.random_range(0.05..0.3) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }
    }
}

/// The radar encoder end to end and the full training objective of a tiny
/// detector with both modules on, on a thinned simulated frame.
fn model(s: &mut Suite, seed: u64) -> Result<()> {
    let mut scene = gen_scene(seed, &SceneConfig::default())?;
    let stride = scene.lidar.len().div_ceil(64).max(1);
    scene.lidar = scene.lidar.iter().step_by(stride).copied().collect();
    scene.radar.truncate(40);
    scene.radar_origin.truncate(40);
    let cfg = ModelConfig {
        lidar_stages: tiny_stages([16, 8, 6, 4], 1.0),
        radar_stages: tiny_stages([16, 8, 6, 4], 1.5),
        shared_width: 4,
        head: HeadConfig { hidden: 4, objectness_threshold: 0.0, ..Default::default() },
        ..Default::default()
    };
    let frame = prepare_frame(&scene, &cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut store = ParamStore::new();
    let enc = EncoderParams::init(&mut store, "enc", RADAR_FEATURES, &cfg.radar_stages, &mut rng)?;
    offset_biases(&mut store, &mut rng);
    s.params("encode_cloud", &store, |t, st| {
        let out = encode_cloud(t, st, &frame.radar, &cfg.radar_stages, &enc, cfg.fps_seed)?;
        project(t, out[3].features, 40)
    });

    let (det, mut store) = Detector::new(&cfg, seed)?;
    offset_biases(&mut store, &mut rng);
    let settings = LossSettings { dmae: DmaeConfig::default(), xua: XuaConfig::default(), radar_weight: 1.0 };
    // matching, filtering and NMS are piecewise constant; hold them at the base point
    let plan = {
        let mut t = Tape::new();
        let fp = det.forward(&mut t, &store, &frame, true)?;
        det.xua_plan(&t, &fp, settings.xua.gate)?
    };
    s.params("model_loss", &store, |t, st| Ok(det.loss_with_plan(t, st, &frame, &settings, Some(&plan))?.0.total));
    Ok(())
}

/// Runs every check with the given probe step and pass tolerance.
pub fn run_suite(seed: u64, step: f64, tolerance: f64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Suite { step, tol: tolerance, out: Vec::new() };
    primitives(&mut s, &mut rng);
    motion(&mut s, &mut rng)?;
    detection(&mut s, &mut rng)?;
    uncertainty(&mut s, &mut rng)?;
    model(&mut s, seed)?;
    Ok(s.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_across_seeds() {
        for seed in 0..12 {
            let out = run_suite(seed, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
            assert!(out.len() >= 30);
            for o in &out {
                assert!(o.passed, "seed {seed}: {o:?}");
                assert!(o.coordinates > 0);
            }
        }
    }
}
