//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use fusiondet::backbone::StageConfig;
use fusiondet::config::RunConfig;
use fusiondet::geom::Box7;
use fusiondet::heads::HeadConfig;
use fusiondet::model::ModelConfig;
use rand::Rng;

/// BEV IoU by jittered stratified sampling of `a`'s footprint on a
/// `grid × grid` lattice; containment in `b` is tested in `b`'s frame.
pub fn monte_carlo_bev_iou<R: Rng>(a: &Box7, b: &Box7, grid: usize, rng: &mut R) -> f64 {
    let (sa, ca) = a.theta.sin_cos();
    let (sb, cb) = b.theta.sin_cos();
    let mut hits = 0usize;
    for i in 0..grid {
        for j in 0..grid {
            let u = (i as f64 + rng.random::<f64>()) / grid as f64 - 0.5;
            let v = (j as f64 + rng.random::<f64>()) / grid as f64 - 0.5;
            let (lx, ly) = (u * a.l, v * a.w);
            let x = a.x + ca * lx - sa * ly - b.x;
            let y = a.y + sa * lx + ca * ly - b.y;
            let bx = cb * x + sb * y;
            let by = -sb * x + cb * y;
            if bx.abs() <= b.l / 2.0 && by.abs() <= b.w / 2.0 {
                hits += 1;
            }
        }
    }
    let area_a = a.l * a.w;
    let inter = area_a * hits as f64 / (grid * grid) as f64;
    inter / (area_a + b.l * b.w - inter)
}

fn overlap(c1: f64, e1: f64, c2: f64, e2: f64) -> f64 {
    ((c1 + e1 / 2.0).min(c2 + e2 / 2.0) - (c1 - e1 / 2.0).max(c2 - e2 / 2.0)).max(0.0)
}

/// 3D IoU of two boxes with `theta = 0` from interval overlaps.
pub fn axis_aligned_iou3d(a: &Box7, b: &Box7) -> f64 {
    let inter = overlap(a.x, a.l, b.x, b.l) * overlap(a.y, a.w, b.y, b.w) * overlap(a.z, a.h, b.z, b.h);
    inter / (a.l * a.w * a.h + b.l * b.w * b.h - inter)
}

/// Minimum assignment cost by enumerating every injective map of the
/// smaller side into the larger one.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let m = cost.len();
    let n = cost.first().map_or(0, Vec::len);
    if m == 0 || n == 0 {
        return 0.0;
    }
    let get = |i: usize, j: usize| if m <= n { cost[i][j] } else { cost[j][i] };
    let (small, large) = (m.min(n), m.max(n));
    let mut used = vec![false; large];
    fn go(
        k: usize,
        small: usize,
        large: usize,
        used: &mut [bool],
        acc: f64,
        best: &mut f64,
        get: &dyn Fn(usize, usize) -> f64,
    ) {
        if k == small {
            *best = best.min(acc);
            return;
        }
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                go(k + 1, small, large, used, acc + get(k, j), best, get);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, small, large, &mut used, 0.0, &mut best, &get);
    best
}

pub fn random_box<R: Rng>(rng: &mut R, around: (f64, f64), spread: f64) -> Box7 {
    Box7::new(
        around.0 + rng.random_range(-spread..spread),
        around.1 + rng.random_range(-spread..spread),
        rng.random_range(-1.0..1.0),
        rng.random_range(0.5..5.0),
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..2.5),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .unwrap()
}

/// Small network and few frames, for end-to-end runs in seconds.
pub fn tiny_config(seed: u64) -> RunConfig {
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
    let mut c = RunConfig { seed, ..Default::default() };
    c.model = ModelConfig {
        lidar_stages: st([32, 16, 8, 6], 1.0),
        radar_stages: st([16, 12, 8, 6], 2.0),
        shared_width: 8,
        head: HeadConfig { hidden: 8, ..Default::default() },
        ..Default::default()
    };
    c.data.train_frames = 6;
    c.data.eval_frames = 3;
    c.train.epochs = 2;
    c.train.batch_size = 3;
    c
}
