use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data]
train_frames = 4
eval_frames = 2

[train]
epochs = 1
batch_size = 2

[model]
shared_width = 8

[model.head]
hidden = 8

[[model.lidar_stages]]
num_keypoints = 32
ball_radius = 1.0
max_neighbors = 6
mlp_widths = [8]

[[model.lidar_stages]]
num_keypoints = 16
ball_radius = 2.0
max_neighbors = 6
mlp_widths = [8]

[[model.lidar_stages]]
num_keypoints = 8
ball_radius = 4.0
max_neighbors = 6
mlp_widths = [8]

[[model.lidar_stages]]
num_keypoints = 6
ball_radius = 8.0
max_neighbors = 6
mlp_widths = [8]

[[model.radar_stages]]
num_keypoints = 16
ball_radius = 2.0
max_neighbors = 6
mlp_widths = [8]

[[model.radar_stages]]
num_keypoints = 12
ball_radius = 4.0
max_neighbors = 6
mlp_widths = [8]

[[model.radar_stages]]
num_keypoints = 8
ball_radius = 8.0
max_neighbors = 6
mlp_widths = [8]

[[model.radar_stages]]
num_keypoints = 6
ball_radius = 16.0
max_neighbors = 6
mlp_widths = [8]
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusiondet")).args(args).output().expect("spawn fusiondet")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_writes_frames_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--frames", "100", "--seed", "7", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for sub in ["lidar", "radar", "label"] {
        assert_eq!(std::fs::read_dir(dir.path().join(sub)).unwrap().count(), 100, "{sub}");
    }
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 7);
    assert_eq!(m["frames"].as_array().unwrap().len(), 100);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("gradcheck.json").exists());
}

#[test]
fn usage_and_config_errors_have_distinct_codes() {
    assert_eq!(code(&run(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&run(&["sweep-lambda", "--lambdas", "x"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepochs = 0\n").unwrap();
    let o = run(&["train", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", p(&cfg)])), 3);
    assert_eq!(code(&run(&["train", "--config", p(&dir.path().join("missing.toml"))])), 4);
}

#[test]
fn train_then_eval_checks_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.json", "metrics.txt", "model.ckpt", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let ck = out.join("model.ckpt");
    let ev = dir.path().join("eval");
    let same = run(&["eval", "--config", p(&cfg), "--checkpoint", p(&ck), "--out", p(&ev)]);
    assert_eq!(code(&same), 0, "{}", String::from_utf8_lossy(&same.stderr));
    assert!(ev.join("eval.json").exists());

    let other = run(&["eval", "--config", p(&cfg), "--seed", "4", "--checkpoint", p(&ck), "--out", p(&ev)]);
    assert_eq!(code(&other), 7);
    assert!(String::from_utf8_lossy(&other.stderr).contains("--force"));
    let forced = run(&["eval", "--config", p(&cfg), "--seed", "4", "--checkpoint", p(&ck), "--force", "--out", p(&ev)]);
    assert_eq!(code(&forced), 0, "{}", String::from_utf8_lossy(&forced.stderr));

    let plots = dir.path().join("plots");
    let o = run(&["plot", "--metrics", p(&out.join("metrics.json")), "--out", p(&plots)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(plots.join("loss.svg").exists());

    std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let junk = run(&["eval", "--config", p(&cfg), "--checkpoint", p(&dir.path().join("junk.ckpt")), "--out", p(&ev)]);
    assert_eq!(code(&junk), 7);
}
