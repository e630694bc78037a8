//! Seeded synthetic scenes with paired LiDAR and 4D-radar clouds.
//!
//! Radar returns reproduce two velocity pathologies: in-box points on moving
//! objects that report zero velocity (dropout) and off-object returns that
//! report nonzero velocity (ghosts).

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{bev_iou, Box7, Corridor, Point3};
use crate::scene::{LidarPoint, ObjectClass, ObjectSpec, RadarOrigin, RadarPoint, SceneFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorModel {
    /// LiDAR returns per m² of visible object surface.
    pub lidar_density: f64,
    /// LiDAR ground returns per m² of scene area.
    pub ground_density: f64,
    /// Mean radar returns per object.
    pub radar_points_per_object: f64,
    /// Mean static off-object radar returns per frame.
    pub radar_clutter_points: f64,
    /// Gaussian position noise σ, meters.
    pub lidar_noise: f64,
    pub radar_noise: f64,
    /// Ghosts as a fraction of the final radar cloud.
    pub ghost_rate: f64,
    /// Zero-velocity returns on moving objects as a fraction of the final
    /// radar cloud, capped by the number of moving-object returns.
    pub dropout_rate: f64,
    pub ego_velocity: [f64; 3],
    /// Sensor height above the ground plane; the sensor sits at the origin.
    pub sensor_height: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            lidar_density: 20.0,
            ground_density: 1.0,
            radar_points_per_object: 30.0,
            radar_clutter_points: 20.0,
            lidar_noise: 0.02,
            radar_noise: 0.05,
            ghost_rate: 0.10,
            dropout_rate: 0.15,
            ego_velocity: [3.0, 0.0, 0.0],
            sensor_height: 1.7,
        }
    }
}

impl SensorModel {
    pub fn ground_z(&self) -> f64 {
        -self.sensor_height
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lidar_density", self.lidar_density),
            ("ground_density", self.ground_density),
            ("radar_points_per_object", self.radar_points_per_object),
            ("radar_clutter_points", self.radar_clutter_points),
            ("lidar_noise", self.lidar_noise),
            ("radar_noise", self.radar_noise),
            ("sensor_height", self.sensor_height),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("sensor.{name} = {v} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.ghost_rate) {
            return Err(Error::Config(format!("sensor.ghost_rate = {} must be in [0,1)", self.ghost_rate)));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("sensor.dropout_rate = {} must be in [0,1]", self.dropout_rate)));
        }
        if self.ego_velocity.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("sensor.ego_velocity must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Car, pedestrian, cyclist; normalized on use.
    pub class_probs: [f64; 3],
    pub moving_prob: f64,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// Minimum BEV range of an object center from the sensor.
    pub min_range: f64,
    /// Largest BEV IoU allowed between object footprints grown by
    /// `spacing`.
    pub max_overlap_iou: f64,
    pub spacing: f64,
    pub max_attempts: usize,
    /// Mean `(l, w, h)` per class.
    pub class_sizes: [[f64; 3]; 3],
    /// Relative uniform size jitter.
    pub size_jitter: f64,
    /// `[min, max]` speed per class, m/s.
    pub speed_ranges: [[f64; 2]; 3],
    /// Moving headings stay within this many degrees of the line of sight
    /// (either direction), so every moving return has a measurable radial
    /// component.
    pub heading_spread_deg: f64,
    pub sensor: SensorModel,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 3,
            max_objects: 8,
            class_probs: [0.5, 0.25, 0.25],
            moving_prob: 0.5,
            x_range: [0.0, 50.0],
            y_range: [-25.0, 25.0],
            min_range: 5.0,
            max_overlap_iou: 0.0,
            spacing: 0.5,
            max_attempts: 200,
            class_sizes: [[4.0, 1.8, 1.6], [0.6, 0.6, 1.7], [1.8, 0.6, 1.7]],
            size_jitter: 0.1,
            speed_ranges: [[3.0, 12.0], [0.8, 2.0], [2.0, 6.0]],
            heading_spread_deg: 30.0,
            sensor: SensorModel::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "sim.min_objects {} > max_objects {}",
                self.min_objects, self.max_objects
            )));
        }
        let total: f64 = self.class_probs.iter().sum();
        if self.class_probs.iter().any(|&p| !(p >= 0.0)) || !(total > 0.0) {
            return Err(Error::Config(format!("sim.class_probs {:?}", self.class_probs)));
        }
        if !(0.0..=1.0).contains(&self.moving_prob) {
            return Err(Error::Config(format!("sim.moving_prob {}", self.moving_prob)));
        }
        if !(self.x_range[0] < self.x_range[1] && self.y_range[0] < self.y_range[1]) {
            return Err(Error::Config("sim ranges must be increasing".into()));
        }
        if !(0.0..=1.0).contains(&self.max_overlap_iou) || !(self.spacing >= 0.0) || !(self.min_range >= 0.0) {
            return Err(Error::Config("sim overlap cap, spacing or min range out of range".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("sim.max_attempts must be positive".into()));
        }
        if self.class_sizes.iter().flatten().any(|&s| !(s > 0.0)) || !(0.0..1.0).contains(&self.size_jitter) {
            return Err(Error::Config("sim sizes must be positive, jitter in [0,1)".into()));
        }
        if self.speed_ranges.iter().any(|r| !(r[0] > 0.0 && r[0] <= r[1])) {
            return Err(Error::Config(format!("sim.speed_ranges {:?}", self.speed_ranges)));
        }
        if !(0.0..90.0).contains(&self.heading_spread_deg) {
            return Err(Error::Config("sim.heading_spread_deg must be in [0,90)".into()));
        }
        self.sensor.validate()
    }
}

/// Radial velocities of a return at `pos` on a body moving with
/// `object_velocity`, seen from a sensor moving with `ego_velocity`:
/// `(v_rel, v_abs)` with `v_rel = (v_obj - v_ego)·u`, `v_abs = |v_obj·u|`.
pub fn doppler(pos: Point3, object_velocity: [f64; 3], ego_velocity: [f64; 3]) -> Result<(f64, f64)> {
    let r = pos.norm();
    if !(r > 1e-9) {
        return Err(Error::domain("doppler", "point at the sensor origin"));
    }
    let u = [pos.x / r, pos.y / r, pos.z / r];
    let dot = |v: [f64; 3]| v[0] * u[0] + v[1] * u[1] + v[2] * u[2];
    let obj = dot(object_velocity);
    Ok((obj - dot(ego_velocity), obj.abs()))
}

fn f32r(x: f64) -> f64 {
    x as f32 as f64
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map_or(0, |d| d.sample(rng) as usize)
}

fn gauss<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).map_or(0.0, |d| d.sample(rng))
}

/// Per-frame seed from a base seed and a frame index.
pub fn frame_seed(base: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(base ^ splitmix(index))
}

fn sample_class<R: Rng>(rng: &mut R, probs: &[f64; 3]) -> ObjectClass {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return ObjectClass::ALL[i];
        }
        u -= p;
    }
    ObjectClass::Cyclist
}

fn inside_bounds(b: &Box7, cfg: &SceneConfig) -> bool {
    b.bev_corners()
        .iter()
        .all(|c| c[0] >= cfg.x_range[0] && c[0] <= cfg.x_range[1] && c[1] >= cfg.y_range[0] && c[1] <= cfg.y_range[1])
}

/// Objects with classes, sizes and motion drawn from `cfg`, placed without
/// footprint overlap.
pub fn place_objects<R: Rng>(rng: &mut R, cfg: &SceneConfig) -> Result<Vec<ObjectSpec>> {
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let ground = cfg.sensor.ground_z();
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = sample_class(rng, &cfg.class_probs);
        let moving = rng.random_bool(cfg.moving_prob);
        let base = cfg.class_sizes[class.index()];
        let j = cfg.size_jitter;
        let size = base.map(|s| s * if j > 0.0 { rng.random_range(1.0 - j..1.0 + j) } else { 1.0 });
        let speed_range = cfg.speed_ranges[class.index()];
        let mut placed = None;
        for _ in 0..cfg.max_attempts {
            let x = rng.random_range(cfg.x_range[0]..cfg.x_range[1]);
            let y = rng.random_range(cfg.y_range[0]..cfg.y_range[1]);
            if x.hypot(y) < cfg.min_range {
                continue;
            }
            let bearing = y.atan2(x);
            let spread = cfg.heading_spread_deg.to_radians();
            let theta = if moving {
                let flip = if rng.random_bool(0.5) { PI } else { 0.0 };
                bearing + flip + if spread > 0.0 { rng.random_range(-spread..spread) } else { 0.0 }
            } else {
                rng.random_range(-PI..PI)
            };
            let b = Box7::new(x, y, ground + size[2] / 2.0, size[0], size[1], size[2], theta)?;
            if !inside_bounds(&b, cfg) {
                continue;
            }
            let grown = b.enlarged(cfg.spacing / 2.0);
            let clash =
                objects.iter().any(|o| bev_iou(&o.bbox.enlarged(cfg.spacing / 2.0), &grown) > cfg.max_overlap_iou);
            if clash {
                continue;
            }
            let velocity = if moving {
                let s = rng.random_range(speed_range[0]..=speed_range[1]);
                [s * b.theta.cos(), s * b.theta.sin(), 0.0]
            } else {
                [0.0; 3]
            };
            placed = Some(ObjectSpec::new(class, b, velocity)?);
            break;
        }
        objects.push(placed.ok_or(Error::Placement { attempts: cfg.max_attempts })?);
    }
    Ok(objects)
}

fn intensity_of(class: ObjectClass) -> f64 {
    match class {
        ObjectClass::Car => 0.6,
        ObjectClass::Pedestrian => 0.35,
        ObjectClass::Cyclist => 0.45,
    }
}

fn rcs_of(class: ObjectClass) -> f64 {
    match class {
        ObjectClass::Car => 10.0,
        ObjectClass::Pedestrian => -5.0,
        ObjectClass::Cyclist => 0.0,
    }
}

const INSET: f64 = 1e-3;

/// Surface returns on the sensor-facing faces of every box plus a noisy
/// ground plane outside box footprints.
pub fn sample_lidar<R: Rng>(rng: &mut R, objects: &[ObjectSpec], cfg: &SceneConfig) -> Vec<LidarPoint> {
    let s = &cfg.sensor;
    let mut out = Vec::new();
    for o in objects {
        let b = &o.bbox;
        let h = [b.l / 2.0, b.w / 2.0, b.h / 2.0];
        let base_i = intensity_of(o.class);
        // (axis, sign); the bottom face never sees the sensor
        for (axis, sign) in [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0)] {
            let mut n_local = [0.0; 3];
            n_local[axis] = sign;
            let mut c_local = [0.0; 3];
            c_local[axis] = sign * h[axis];
            let c = b.to_world(Point3::from(c_local));
            let (sn, cs) = b.theta.sin_cos();
            let n = [cs * n_local[0] - sn * n_local[1], sn * n_local[0] + cs * n_local[1], n_local[2]];
            if n[0] * -c.x + n[1] * -c.y + n[2] * -c.z <= 0.0 {
                continue;
            }
            let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
            let area = 4.0 * h[a1] * h[a2];
            for _ in 0..poisson(rng, s.lidar_density * area) {
                let mut p = [0.0; 3];
                p[axis] = sign * (h[axis] - INSET);
                p[a1] = rng.random_range(-(h[a1] - INSET)..=(h[a1] - INSET));
                p[a2] = rng.random_range(-(h[a2] - INSET)..=(h[a2] - INSET));
                let w = b.to_world(Point3::from(p));
                out.push(LidarPoint {
                    x: f32r(w.x + gauss(rng, s.lidar_noise)),
                    y: f32r(w.y + gauss(rng, s.lidar_noise)),
                    z: f32r(w.z + gauss(rng, s.lidar_noise)),
                    intensity: f32r(base_i + rng.random_range(-0.05..0.05)),
                });
            }
        }
    }
    let area = (cfg.x_range[1] - cfg.x_range[0]) * (cfg.y_range[1] - cfg.y_range[0]);
    let ground = s.ground_z();
    for _ in 0..poisson(rng, s.ground_density * area) {
        let x = rng.random_range(cfg.x_range[0]..cfg.x_range[1]);
        let y = rng.random_range(cfg.y_range[0]..cfg.y_range[1]);
        let under = objects.iter().any(|o| {
            let l = o.bbox.to_local(Point3::new(x, y, o.bbox.z));
            l.x.abs() <= o.bbox.l / 2.0 && l.y.abs() <= o.bbox.w / 2.0
        });
        if under || x.hypot(y) < 1.0 {
            continue;
        }
        out.push(LidarPoint {
            x: f32r(x),
            y: f32r(y),
            z: f32r(ground + gauss(rng, s.lidar_noise)),
            intensity: f32r(0.1 + rng.random_range(-0.05..0.05)),
        });
    }
    out.shuffle(rng);
    out
}

/// Uniform position away from every box (grown by `margin`), or `None` if
/// none is found quickly.
fn free_position<R: Rng>(rng: &mut R, objects: &[ObjectSpec], cfg: &SceneConfig, margin: f64) -> Option<Point3> {
    let ground = cfg.sensor.ground_z();
    for _ in 0..100 {
        let p = Point3::new(
            rng.random_range(cfg.x_range[0]..cfg.x_range[1]),
            rng.random_range(cfg.y_range[0]..cfg.y_range[1]),
            rng.random_range(ground + 0.1..ground + 2.5),
        );
        if p.x.hypot(p.y) < 1.0 {
            continue;
        }
        if objects.iter().all(|o| !crate::geom::point_in_box(p, &o.bbox.enlarged(margin))) {
            return Some(p);
        }
    }
    None
}

/// Sparse radar returns with Doppler velocities and the configured
/// pathologies. Returns points and their provenance, shuffled together.
pub fn sample_radar<R: Rng>(
    rng: &mut R,
    objects: &[ObjectSpec],
    cfg: &SceneConfig,
) -> Result<(Vec<RadarPoint>, Vec<RadarOrigin>)> {
    let s = &cfg.sensor;
    let mut pts = Vec::new();
    let mut origin = Vec::new();
    for (k, o) in objects.iter().enumerate() {
        let b = &o.bbox;
        let h = [b.l / 2.0 - INSET, b.w / 2.0 - INSET, b.h / 2.0 - INSET];
        for _ in 0..poisson(rng, s.radar_points_per_object) {
            let mut l = [0.0; 3];
            for a in 0..3 {
                l[a] = (rng.random_range(-h[a]..=h[a]) + gauss(rng, s.radar_noise)).clamp(-h[a], h[a]);
            }
            let w = b.to_world(Point3::from(l));
            let (v_rel, v_abs) = doppler(w, o.velocity, s.ego_velocity)?;
            pts.push(RadarPoint { x: w.x, y: w.y, z: w.z, v_rel, v_abs, rcs: rcs_of(o.class) + gauss(rng, 3.0) });
            origin.push(RadarOrigin::Object { index: k, dropped: false });
        }
    }
    for _ in 0..poisson(rng, s.radar_clutter_points) {
        if let Some(p) = free_position(rng, objects, cfg, 0.5) {
            let (v_rel, v_abs) = doppler(p, [0.0; 3], s.ego_velocity)?;
            pts.push(RadarPoint { x: p.x, y: p.y, z: p.z, v_rel, v_abs, rcs: rng.random_range(-10.0..15.0) });
            origin.push(RadarOrigin::Clutter);
        }
    }
    let n0 = pts.len() as f64;
    let ghosts = (s.ghost_rate * n0 / (1.0 - s.ghost_rate)).round() as usize;
    for _ in 0..ghosts {
        if let Some(p) = free_position(rng, objects, cfg, 0.5) {
            let speed = rng.random_range(0.5..6.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let (ego_rel, _) = doppler(p, [0.0; 3], s.ego_velocity)?;
            pts.push(RadarPoint {
                x: p.x,
                y: p.y,
                z: p.z,
                v_rel: speed + ego_rel,
                v_abs: speed.abs(),
                rcs: rng.random_range(-10.0..15.0),
            });
            origin.push(RadarOrigin::Ghost);
        }
    }
    let pool: Vec<usize> = origin
        .iter()
        .enumerate()
        .filter(|(_, o)| matches!(o, RadarOrigin::Object { index, .. } if objects[*index].moving))
        .map(|(i, _)| i)
        .collect();
    let drops = ((s.dropout_rate * pts.len() as f64).round() as usize).min(pool.len());
    for j in rand::seq::index::sample(rng, pool.len(), drops) {
        let i = pool[j];
        let p = &mut pts[i];
        let (v_rel, _) = doppler(p.pos(), [0.0; 3], s.ego_velocity)?;
        p.v_rel = v_rel;
        p.v_abs = 0.0;
        if let RadarOrigin::Object { dropped, .. } = &mut origin[i] {
            *dropped = true;
        }
    }
    for p in &mut pts {
        *p = RadarPoint {
            x: f32r(p.x),
            y: f32r(p.y),
            z: f32r(p.z),
            v_rel: f32r(p.v_rel),
            v_abs: f32r(p.v_abs),
            rcs: f32r(p.rcs),
        };
    }
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.shuffle(rng);
    Ok((order.iter().map(|&i| pts[i]).collect(), order.iter().map(|&i| origin[i]).collect()))
}

pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneFrame> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = place_objects(&mut rng, cfg)?;
    let lidar = sample_lidar(&mut rng, &objects, cfg);
    let (radar, radar_origin) = sample_radar(&mut rng, &objects, cfg)?;
    let corridor = Corridor::default();
    Ok(SceneFrame {
        frame_id: seed,
        in_corridor: objects.iter().map(|o| corridor.contains(&o.bbox)).collect(),
        objects,
        lidar,
        radar,
        radar_origin,
    })
}

/// Frames `start..start + count` of the sequence defined by `base_seed`,
/// generated in parallel and returned in index order. Frame ids are the
/// indices.
pub fn gen_frames(base_seed: u64, start: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<SceneFrame>> {
    cfg.validate()?;
    (start..start + count as u64)
        .into_par_iter()
        .map(|i| {
            let mut f = gen_scene(frame_seed(base_seed, i), cfg)?;
            f.frame_id = i;
            Ok(f)
        })
        .collect()
}
