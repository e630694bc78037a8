//! Point-based encoder: four chained down-sampling + set-abstraction stages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub num_keypoints: usize,
    pub ball_radius: f64,
    pub max_neighbors: usize,
    /// Hidden and output widths of the shared MLP; the last entry is the
    /// stage feature width.
    pub mlp_widths: Vec<usize>,
}

impl StageConfig {
    pub fn out_width(&self) -> usize {
        self.mlp_widths.last().copied().unwrap_or(0)
    }
}

pub fn validate_stages(stages: &[StageConfig]) -> Result<()> {
    if stages.len() != 4 {
        return Err(Error::Config(format!("expected 4 encoder stages, got {}", stages.len())));
    }
    for (i, s) in stages.iter().enumerate() {
        if s.num_keypoints == 0 || s.max_neighbors == 0 {
            return Err(Error::Config(format!("stage {i}: keypoint and neighbor counts must be positive")));
        }
        if !(s.ball_radius > 0.0 && s.ball_radius.is_finite()) {
            return Err(Error::Config(format!("stage {i}: ball radius {} must be positive", s.ball_radius)));
        }
        if s.mlp_widths.is_empty() || s.mlp_widths.contains(&0) {
            return Err(Error::Config(format!("stage {i}: mlp widths {:?}", s.mlp_widths)));
        }
        if i > 0 && s.num_keypoints > stages[i - 1].num_keypoints {
            return Err(Error::Config(format!(
                "stage {i}: {} keypoints exceeds previous stage {}",
                s.num_keypoints,
                stages[i - 1].num_keypoints
            )));
        }
    }
    Ok(())
}

/// Greedy max-min subset starting at `seed_index`. Ties go to the lowest
/// index.
pub fn farthest_point_sample(points: &[[f64; 3]], count: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if count > n {
        return Err(Error::Invalid(format!("cannot sample {count} of {n} points")));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if seed_index >= n {
        return Err(Error::Invalid(format!("seed index {seed_index} out of range for {n} points")));
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(count);
    let mut last = seed_index;
    taken[last] = true;
    out.push(last);
    while out.len() < count {
        let p = points[last];
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = sq_dist(&points[i], &p);
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best_d {
                best_d = dist[i];
                best = i;
            }
        }
        taken[best] = true;
        out.push(best);
        last = best;
    }
    Ok(out)
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// For each center index, exactly `max_neighbors` indices: the center first,
/// then the nearest other points within `radius` ordered by (distance,
/// index), padded by repeating the center.
pub fn ball_query(
    points: &[[f64; 3]],
    centers: &[usize],
    radius: f64,
    max_neighbors: usize,
) -> Result<Vec<Vec<usize>>> {
    if !(radius > 0.0) {
        return Err(Error::Invalid(format!("ball radius {radius} must be positive")));
    }
    if max_neighbors == 0 {
        return Err(Error::Invalid("max_neighbors must be positive".into()));
    }
    let r2 = radius * radius;
    let mut cand: Vec<(f64, usize)> = Vec::new();
    centers
        .iter()
        .map(|&c| {
            let p = points.get(c).ok_or_else(|| Error::Invalid(format!("center index {c} out of range")))?;
            cand.clear();
            cand.extend(
                points
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != c)
                    .map(|(i, q)| (sq_dist(p, q), i))
                    .filter(|&(d, _)| d <= r2),
            );
            let keep = (max_neighbors - 1).min(cand.len());
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if keep < cand.len() && keep > 0 {
                cand.select_nth_unstable_by(keep - 1, cmp);
            }
            cand.truncate(keep);
            cand.sort_unstable_by(cmp);
            let mut list = Vec::with_capacity(max_neighbors);
            list.push(c);
            list.extend(cand.iter().map(|&(_, i)| i));
            list.resize(max_neighbors, c);
            Ok(list)
        })
        .collect()
}

/// Learned weights of one set-abstraction stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SaParams {
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub stages: Vec<SaParams>,
}

impl EncoderParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_features: usize,
        stages: &[StageConfig],
        rng: &mut R,
    ) -> Result<Self> {
        validate_stages(stages)?;
        let mut width = in_features;
        let mut out = Vec::with_capacity(stages.len());
        for (i, s) in stages.iter().enumerate() {
            let mut widths = vec![width + 3];
            widths.extend(&s.mlp_widths);
            out.push(SaParams { mlp: Mlp::init(store, &format!("{prefix}.sa{i}"), &widths, rng)? });
            width = s.out_width();
        }
        Ok(Self { stages: out })
    }
}

/// Input to the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Cloud {
    pub xyz: Vec<[f64; 3]>,
    /// `len × C` per-point features.
    pub features: Tensor,
    /// Radar only: `(v_rel, v_abs)` per point.
    pub velocity: Option<Vec<[f64; 2]>>,
}

impl Cloud {
    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    /// Indices into the original cloud.
    pub source: Vec<usize>,
    pub keypoints: Vec<[f64; 3]>,
    /// `M_i × N_i`.
    pub features: Var,
    /// Velocity of each keypoint's source point.
    pub velocity: Option<Vec<[f64; 2]>>,
}

/// One stage: sample `num_keypoints` centers, group neighbors, and pool the
/// shared MLP over each group. Returns the sampled indices into `xyz` and the
/// pooled features.
pub fn set_abstraction(
    tape: &mut Tape,
    store: &ParamStore,
    xyz: &[[f64; 3]],
    features: Var,
    config: &StageConfig,
    params: &SaParams,
    seed_index: usize,
) -> Result<(Vec<usize>, Var)> {
    let (rows, c) = tape.value(features).dims2("set_abstraction")?;
    if rows != xyz.len() {
        return Err(Error::shape("set_abstraction", format!("{} points but {rows} feature rows", xyz.len())));
    }
    let expect = params.mlp.layers[0].in_features(store);
    if c + 3 != expect {
        return Err(Error::shape(
            "set_abstraction",
            format!("feature width {c} + 3 does not match mlp input {expect}"),
        ));
    }
    let centers = farthest_point_sample(xyz, config.num_keypoints, seed_index)?;
    let groups = ball_query(xyz, &centers, config.ball_radius, config.max_neighbors)?;
    let inv_r = 1.0 / config.ball_radius;
    let mut flat = Vec::with_capacity(centers.len() * config.max_neighbors);
    let mut rel = Vec::with_capacity(centers.len() * config.max_neighbors * 3);
    for (&c, g) in centers.iter().zip(&groups) {
        let o = xyz[c];
        for &j in g {
            flat.push(j);
            let p = xyz[j];
            rel.extend_from_slice(&[(p[0] - o[0]) * inv_r, (p[1] - o[1]) * inv_r, (p[2] - o[2]) * inv_r]);
        }
    }
    let rel = tape.constant(Tensor::matrix(flat.len(), 3, rel)?)?;
    let grouped = tape.gather_rows(features, &flat)?;
    let x = tape.concat_cols(&[rel, grouped])?;
    let h = params.mlp.forward(tape, store, x, true)?;
    let pooled = tape.max_over_set(h, config.max_neighbors)?;
    Ok((centers, pooled))
}

/// How each stage picks its first FPS point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpsSeed {
    /// Always index 0.
    #[default]
    First,
    /// Uniform random index per stage from the given seed.
    Random(u64),
}

pub fn encode_cloud(
    tape: &mut Tape,
    store: &ParamStore,
    cloud: &Cloud,
    configs: &[StageConfig],
    params: &EncoderParams,
    fps_seed: FpsSeed,
) -> Result<Vec<StageOutput>> {
    encode_cloud_with(tape, store, cloud, configs, params, fps_seed, |_, _, _| Ok(None))
}

/// [`encode_cloud`] with a hook run after every stage. A hook returning
/// `Some(v)` replaces that stage's features before the next stage.
pub fn encode_cloud_with<F>(
    tape: &mut Tape,
    store: &ParamStore,
    cloud: &Cloud,
    configs: &[StageConfig],
    params: &EncoderParams,
    fps_seed: FpsSeed,
    mut hook: F,
) -> Result<Vec<StageOutput>>
where
    F: FnMut(&mut Tape, usize, &StageOutput) -> Result<Option<Var>>,
{
    validate_stages(configs)?;
    if params.stages.len() != configs.len() {
        return Err(Error::shape(
            "encode_cloud",
            format!("{} stage configs, {} parameter sets", configs.len(), params.stages.len()),
        ));
    }
    if cloud.len() < configs[0].num_keypoints {
        return Err(Error::Invalid(format!(
            "cloud has {} points, first stage needs {}",
            cloud.len(),
            configs[0].num_keypoints
        )));
    }
    if cloud.features.rows() != cloud.len() {
        return Err(Error::shape(
            "encode_cloud",
            format!("{} points, {} feature rows", cloud.len(), cloud.features.rows()),
        ));
    }
    if let Some(v) = &cloud.velocity {
        if v.len() != cloud.len() {
            return Err(Error::shape("encode_cloud", format!("{} points, {} velocities", cloud.len(), v.len())));
        }
    }
    let mut rng = match fps_seed {
        FpsSeed::First => None,
        FpsSeed::Random(s) => Some(ChaCha8Rng::seed_from_u64(s)),
    };

    let mut xyz = cloud.xyz.clone();
    let mut source: Vec<usize> = (0..cloud.len()).collect();
    let mut features = tape.constant(cloud.features.clone())?;
    let mut outputs = Vec::with_capacity(configs.len());
    for (i, (cfg, p)) in configs.iter().zip(&params.stages).enumerate() {
        let seed_index = rng.as_mut().map_or(0, |r| r.random_range(0..xyz.len()));
        let (idx, f) = set_abstraction(tape, store, &xyz, features, cfg, p, seed_index)?;
        let src: Vec<usize> = idx.iter().map(|&j| source[j]).collect();
        let mut out = StageOutput {
            keypoints: idx.iter().map(|&j| xyz[j]).collect(),
            velocity: cloud.velocity.as_ref().map(|v| src.iter().map(|&s| v[s]).collect()),
            source: src,
            features: f,
        };
        if let Some(h) = hook(tape, i, &out)? {
            out.features = h;
        }
        xyz.clone_from(&out.keypoints);
        source.clone_from(&out.source);
        features = out.features;
        outputs.push(out);
    }
    Ok(outputs)
}
