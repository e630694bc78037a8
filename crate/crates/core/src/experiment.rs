//! Ablation grid over the two modules and the λ sweep.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::train::{build_dataset, evaluate_model, train, EpochLog, ModelEval};

/// λ values of the sweep table.
pub const SWEEP_LAMBDAS: [f64; 4] = [0.001, 0.1, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub dmae: bool,
    pub xua: bool,
    pub lambda: f64,
    pub config_hash: String,
    pub split_hash: String,
    pub history: Vec<EpochLog>,
    pub eval: ModelEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub kind: String,
    pub base_config_hash: String,
    pub seed: u64,
    pub cells: Vec<CellResult>,
}

/// Trains and evaluates one configuration. With `out`, the cell's
/// checkpoint is written to `out/<name>.ckpt`.
pub fn run_cell(cfg: &RunConfig, name: &str, out: Option<&Path>) -> Result<CellResult> {
    let run = || -> Result<CellResult> {
        let data = build_dataset(cfg)?;
        let ckpt = out.map(|d| d.join(format!("{name}.ckpt")));
        let trained = train(cfg, &data.train, ckpt.as_deref())?;
        let eval = evaluate_model(&trained.detector, &trained.params, &data.eval, cfg)?;
        Ok(CellResult {
            name: name.to_string(),
            dmae: cfg.dmae.enabled,
            xua: cfg.xua.enabled,
            lambda: cfg.xua.lambda,
            config_hash: cfg.hash()?,
            split_hash: data.split_hash,
            history: trained.history,
            eval,
        })
    };
    run().map_err(|e| Error::Cell { cell: name.to_string(), source: Box::new(e) })
}

/// The four on/off combinations, baseline first.
pub fn ablation_cells(base: &RunConfig) -> Vec<(String, RunConfig)> {
    [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(d, x)| {
            let mut c = base.clone();
            c.dmae.enabled = d;
            c.xua.enabled = x;
            let name = match (d, x) {
                (false, false) => "baseline".to_string(),
                (true, false) => "dmae".to_string(),
                (false, true) => "xua".to_string(),
                (true, true) => "dmae_xua".to_string(),
            };
            (name, c)
        })
        .collect()
}

pub fn run_ablation(base: &RunConfig, out: Option<&Path>) -> Result<ExperimentResult> {
    base.validate()?;
    let cells = ablation_cells(base).iter().map(|(name, c)| run_cell(c, name, out)).collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult { kind: "ablation".into(), base_config_hash: base.hash()?, seed: base.seed, cells })
}

/// Config for one sweep row: X-UA on, the motion module off.
pub fn sweep_config(base: &RunConfig, lambda: f64) -> RunConfig {
    let mut c = base.clone();
    c.dmae.enabled = false;
    c.xua.enabled = true;
    c.xua.lambda = lambda;
    c
}

pub fn lambda_sweep(base: &RunConfig, lambdas: &[f64], out: Option<&Path>) -> Result<ExperimentResult> {
    base.validate()?;
    if lambdas.is_empty() {
        return Err(Error::Invalid("lambda sweep needs at least one value".into()));
    }
    let cells = lambdas
        .iter()
        .map(|&l| {
            let c = sweep_config(base, l);
            c.validate()?;
            run_cell(&c, &format!("lambda_{l}"), out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult { kind: "lambda_sweep".into(), base_config_hash: base.hash()?, seed: base.seed, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_covers_all_flag_pairs() {
        let base = RunConfig::default();
        let cells = ablation_cells(&base);
        let flags: Vec<(bool, bool)> = cells.iter().map(|(_, c)| (c.dmae.enabled, c.xua.enabled)).collect();
        assert_eq!(flags, vec![(false, false), (true, false), (false, true), (true, true)]);
        for (_, c) in &cells {
            assert_eq!(c.seed, base.seed);
            assert_eq!(c.data, base.data);
            assert_eq!(c.model, base.model);
        }
    }

    #[test]
    fn sweep_rows_disable_motion_module() {
        for l in SWEEP_LAMBDAS {
            let c = sweep_config(&RunConfig::default(), l);
            assert!(!c.dmae.enabled && c.xua.enabled);
            assert_eq!(c.xua.lambda, l);
        }
        assert!(lambda_sweep(&RunConfig::default(), &[], None).is_err());
    }
}
