use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fusiondet::config::{Overrides, RunConfig};
use fusiondet::experiment::{lambda_sweep, run_ablation, run_cell, ExperimentResult, SWEEP_LAMBDAS};
use fusiondet::gradcheck::{run_suite, DEFAULT_STEP, DEFAULT_TOLERANCE};
use fusiondet::io::{write_frame, write_manifest, Checkpoint, Manifest};
use fusiondet::report;
use fusiondet::sim::gen_frames;
use fusiondet::train::{build_dataset, evaluate_model, init_model};
use fusiondet::Error;

#[derive(Parser, Debug)]
#[command(name = "fusiondet", version, about = "LiDAR / 4D-radar fusion detector experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        s == Switch::On
    }
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// X-UA regularization weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    dmae: Option<Switch>,
    #[arg(long, value_enum)]
    xua: Option<Switch>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write simulated frames plus a manifest.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of frames; defaults to train + eval frames of the config.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train one model, evaluate it and write metrics and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Accept a checkpoint trained under a different config.
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate the 2x2 module grid.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate one X-UA model per lambda with the motion module off.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_LAMBDAS)]
        lambdas: Vec<f64>,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Render SVG charts from a metrics JSON file.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        metrics: PathBuf,
    },
}

/// Process exit categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Exit {
    Other = 1,
    Config = 3,
    Data = 4,
    Training = 5,
    CheckFailed = 6,
    Checkpoint = 7,
}

struct Failure {
    code: Exit,
    message: String,
}

fn exit_code(e: &Error) -> Exit {
    match e {
        Error::Config(_) => Exit::Config,
        Error::Io { .. } | Error::Parse { .. } | Error::Truncated { .. } | Error::Json(_) => Exit::Data,
        Error::Checkpoint(_) => Exit::Checkpoint,
        Error::NanLoss { .. } => Exit::Training,
        Error::Cell { source, .. } => match exit_code(source) {
            Exit::Other => Exit::Training,
            c => c,
        },
        _ => Exit::Other,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: exit_code(&e), message: e.to_string() }
    }
}

type CliResult<T> = Result<T, Failure>;

fn fail(code: Exit, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

fn load_config(c: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides { seed: c.seed, lambda: c.lambda, dmae: c.dmae.map(bool::from), xua: c.xua.map(bool::from) })?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    write(path, &s)
}

fn save_config(out: &Path, cfg: &RunConfig) -> CliResult<String> {
    let hash = cfg.hash()?;
    write(&out.join("config.toml"), &format!("# config hash {hash}\n{}", cfg.to_toml()?))?;
    Ok(hash)
}

fn simulate(common: &Common, frames: Option<usize>) -> CliResult<()> {
    let cfg = load_config(common)?;
    let n = frames.unwrap_or(cfg.data.train_frames + cfg.data.eval_frames);
    let hash = save_config(&common.out, &cfg)?;
    let scenes = gen_frames(cfg.seed, 0, n, &cfg.sim)?;
    for f in &scenes {
        write_frame(&common.out, f)?;
    }
    write_manifest(
        &common.out,
        &Manifest { config_hash: hash.clone(), seed: cfg.seed, frames: scenes.iter().map(|f| f.frame_id).collect() },
    )?;
    println!("wrote {n} frames to {} (config {hash})", common.out.display());
    Ok(())
}

fn experiment_outputs(out: &Path, name: &str, r: &ExperimentResult, table: String) -> CliResult<()> {
    write_json(&out.join(format!("{name}.json")), r)?;
    write(&out.join(format!("{name}.txt")), &table)?;
    print!("{table}");
    Ok(())
}

fn train_cmd(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let hash = save_config(&common.out, &cfg)?;
    let cell = run_cell(&cfg, "model", Some(&common.out))?;
    let mut table = report::history_table(&cell.history);
    table.push_str(&report::eval_table(&cell.eval));
    let r = ExperimentResult { kind: "train".into(), base_config_hash: hash, seed: cfg.seed, cells: vec![cell] };
    experiment_outputs(&common.out, "metrics", &r, table)
}

fn eval_cmd(common: &Common, checkpoint: &Path, force: bool) -> CliResult<()> {
    let cfg = load_config(common)?;
    let hash = cfg.hash()?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.config_hash != hash && !force {
        return Err(fail(
            Exit::Checkpoint,
            format!(
                "{} was trained under config {} but the supplied config hashes to {hash}; pass --force to evaluate anyway",
                checkpoint.display(),
                ck.config_hash
            ),
        ));
    }
    let (detector, mut params) = init_model(&cfg)?;
    params.load_from(&ck.params).map_err(|e| fail(Exit::Checkpoint, format!("{}: {e}", checkpoint.display())))?;
    let data = build_dataset(&cfg)?;
    let e = evaluate_model(&detector, &params, &data.eval, &cfg)?;
    write_json(&common.out.join("eval.json"), &e)?;
    let table = report::eval_table(&e);
    write(&common.out.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn gradcheck_cmd(common: &Common, tolerance: f64) -> CliResult<()> {
    let cfg = load_config(common)?;
    let outcomes = run_suite(cfg.seed, DEFAULT_STEP, tolerance)?;
    let mut table = String::from("check                   max rel error  coords  result\n");
    for o in &outcomes {
        table.push_str(&format!(
            "{:<22} {:>14.3e} {:>7}  {}\n",
            o.name,
            o.max_rel_error,
            o.coordinates,
            if o.passed { "ok" } else { "FAIL" }
        ));
    }
    write_json(&common.out.join("gradcheck.json"), &outcomes)?;
    print!("{table}");
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(fail(Exit::CheckFailed, format!("gradient check above {tolerance:e}: {}", failed.join(", "))))
    }
}

fn plot_cmd(common: &Common, metrics: &Path) -> CliResult<()> {
    let text = fs::read_to_string(metrics).map_err(|e| Error::Io { path: metrics.to_path_buf(), source: e })?;
    let r: ExperimentResult = serde_json::from_str(&text)
        .map_err(|e| fail(Exit::Data, format!("{}: not a metrics file: {e}", metrics.display())))?;
    let series: Vec<_> = r.cells.iter().map(|c| report::loss_series(&c.name, &c.history)).collect();
    let title = format!("training loss ({}, config {})", r.kind, r.base_config_hash);
    write(&common.out.join("loss.svg"), &report::line_chart_svg(&title, "epoch", &series))?;
    for (region, file) in [("entire area", "map_all.svg"), ("driving corridor", "map_corridor.svg")] {
        let bars: Vec<(String, f64)> = r
            .cells
            .iter()
            .map(|c| {
                let rep = if file == "map_all.svg" { &c.eval.report.all } else { &c.eval.report.corridor };
                (c.name.clone(), rep.map.unwrap_or(f64::NAN))
            })
            .collect();
        write(
            &common.out.join(file),
            &report::bar_chart_svg(&format!("mAP, {region} (config {})", r.base_config_hash), &bars),
        )?;
    }
    println!("wrote loss.svg, map_all.svg, map_corridor.svg to {}", common.out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { common, frames } => simulate(&common, frames),
        Command::Train { common } => train_cmd(&common),
        Command::Eval { common, checkpoint, force } => eval_cmd(&common, &checkpoint, force),
        Command::Ablate { common } => {
            let cfg = load_config(&common)?;
            save_config(&common.out, &cfg)?;
            let r = run_ablation(&cfg, Some(&common.out))?;
            experiment_outputs(&common.out, "ablation", &r, report::ablation_table(&r))
        }
        Command::SweepLambda { common, lambdas } => {
            let cfg = load_config(&common)?;
            save_config(&common.out, &cfg)?;
            let r = lambda_sweep(&cfg, &lambdas, Some(&common.out))?;
            experiment_outputs(&common.out, "sweep", &r, report::sweep_table(&r))
        }
        Command::Gradcheck { common, tolerance } => gradcheck_cmd(&common, tolerance),
        Command::Plot { common, metrics } => plot_cmd(&common, &metrics),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
