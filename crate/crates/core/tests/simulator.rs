use fusiondet::dmae::label_point_motion;
use fusiondet::scene::{ObjectClass, RadarOrigin, SceneFrame};
use fusiondet::sim::{gen_frames, gen_scene, SceneConfig};

const THRESHOLD: f64 = 0.1;

/// `(misclassified, dropped, ghosts, total)` of the `v_abs > τ` rule.
fn threshold_errors(frames: &[SceneFrame]) -> (usize, usize, usize, usize) {
    let (mut wrong, mut dropped, mut ghosts, mut total) = (0, 0, 0, 0);
    for f in frames {
        let pos: Vec<[f64; 3]> = f.radar.iter().map(|p| [p.x, p.y, p.z]).collect();
        let labels = label_point_motion(&pos, &f.annotations());
        for ((p, &y), o) in f.radar.iter().zip(&labels).zip(&f.radar_origin) {
            wrong += usize::from((p.v_abs > THRESHOLD) != (y == 1));
            match o {
                RadarOrigin::Object { dropped: true, .. } => dropped += 1,
                RadarOrigin::Ghost => ghosts += 1,
                _ => {}
            }
            total += 1;
        }
    }
    (wrong, dropped, ghosts, total)
}

#[test]
fn same_seed_same_frames() {
    let cfg = SceneConfig::default();
    assert_eq!(gen_frames(9, 0, 6, &cfg).unwrap(), gen_frames(9, 0, 6, &cfg).unwrap());
    assert_eq!(gen_frames(9, 2, 2, &cfg).unwrap()[..], gen_frames(9, 0, 4, &cfg).unwrap()[2..]);
    assert_ne!(gen_scene(1, &cfg).unwrap(), gen_scene(2, &cfg).unwrap());
}

#[test]
fn class_and_motion_frequencies_within_three_sigma() {
    let cfg = SceneConfig::default();
    let frames = gen_frames(17, 0, 300, &cfg).unwrap();
    let objects: Vec<_> = frames.iter().flat_map(|f| &f.objects).collect();
    let n = objects.len() as f64;
    for (c, p) in ObjectClass::ALL.into_iter().zip(cfg.class_probs) {
        let k = objects.iter().filter(|o| o.class == c).count() as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((k - n * p).abs() < 3.0 * sigma, "{c:?}: {k} of {n}");
    }
    let moving = objects.iter().filter(|o| o.moving).count() as f64;
    let p = cfg.moving_prob;
    assert!((moving - n * p).abs() < 3.0 * (n * p * (1.0 - p)).sqrt(), "{moving} of {n}");
    let per_frame = n / frames.len() as f64;
    let mid = (cfg.min_objects + cfg.max_objects) as f64 / 2.0;
    assert!((per_frame - mid).abs() < 0.5, "{per_frame}");
}

#[test]
fn radar_is_an_order_of_magnitude_sparser() {
    for f in gen_frames(5, 0, 50, &SceneConfig::default()).unwrap() {
        assert!(!f.radar.is_empty());
        assert!((f.radar.len() as f64) < 0.1 * f.lidar.len() as f64, "{} vs {}", f.radar.len(), f.lidar.len());
    }
}

#[test]
fn threshold_rule_errs_exactly_on_dropped_and_ghost_points() {
    let frames = gen_frames(23, 0, 100, &SceneConfig::default()).unwrap();
    let (wrong, dropped, ghosts, total) = threshold_errors(&frames);
    assert!(dropped > 0 && ghosts > 0);
    assert_eq!(wrong, dropped + ghosts);
    let g = ghosts as f64 / total as f64;
    let d = dropped as f64 / total as f64;
    assert!((g - 0.10).abs() < 0.015, "ghost share {g}");
    assert!((d - 0.15).abs() < 0.02, "dropout share {d}");
}

#[test]
fn threshold_rule_is_exact_without_pathologies() {
    let mut cfg = SceneConfig::default();
    cfg.sensor.ghost_rate = 0.0;
    cfg.sensor.dropout_rate = 0.0;
    let frames = gen_frames(29, 0, 100, &cfg).unwrap();
    let (wrong, dropped, ghosts, total) = threshold_errors(&frames);
    assert!(total > 1000);
    assert_eq!((wrong, dropped, ghosts), (0, 0, 0));
}
