//! Run configuration: one TOML file with a section per subsystem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::AdamConfig;
use crate::dmae::DmaeConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{LossSettings, ModelConfig};
use crate::sim::SceneConfig;
use crate::xua::XuaConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_frames: usize,
    pub eval_frames: usize,
    /// Dataset directory written by `simulate`. Frames are generated in
    /// memory when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_frames: 400, eval_frames: 100, dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip per step.
    pub clip_norm: f64,
    /// Weight of the radar-branch detection loss.
    pub radar_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 8, adam: AdamConfig::default(), clip_norm: 10.0, radar_weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub dmae: DmaeConfig,
    pub xua: XuaConfig,
    pub eval: EvalConfig,
    pub sim: SceneConfig,
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub dmae: Option<bool>,
    pub xua: Option<bool>,
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} must be positive and finite")))
    }
}

fn check_unit_open(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} must lie in (0,1)")))
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(short_hash(self.to_toml()?.as_bytes()))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(l) = o.lambda {
            self.xua.lambda = l;
        }
        if let Some(d) = o.dmae {
            self.dmae.enabled = d;
        }
        if let Some(x) = o.xua {
            self.xua.enabled = x;
        }
        self.validate()
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings { dmae: self.dmae, xua: self.xua, radar_weight: self.train.radar_weight }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        check_positive("train.adam.lr", t.adam.lr)?;
        check_positive("train.adam.eps", t.adam.eps)?;
        check_unit_open("train.adam.beta1", t.adam.beta1)?;
        check_unit_open("train.adam.beta2", t.adam.beta2)?;
        check_positive("train.clip_norm", t.clip_norm)?;
        if !(t.radar_weight >= 0.0 && t.radar_weight.is_finite()) {
            return Err(Error::Config("train.radar_weight must be >= 0".into()));
        }
        if self.data.train_frames == 0 || self.data.eval_frames == 0 {
            return Err(Error::Config("data.train_frames and data.eval_frames must be positive".into()));
        }
        check_unit_open("dmae.alpha", self.dmae.alpha)?;
        if !(self.dmae.gamma >= 0.0 && self.dmae.gamma.is_finite()) {
            return Err(Error::Config("dmae.gamma must be >= 0".into()));
        }
        if !(self.dmae.weight >= 0.0 && self.dmae.weight.is_finite()) {
            return Err(Error::Config("dmae.weight must be >= 0".into()));
        }
        if !(self.xua.lambda >= 0.0 && self.xua.lambda.is_finite()) {
            return Err(Error::Config(format!("xua.lambda = {} must be >= 0", self.xua.lambda)));
        }
        if let Some(g) = self.xua.gate {
            check_positive("xua.gate", g)?;
        }
        self.model.validate()?;
        self.eval.validate()?;
        self.sim.validate()
    }
}

pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let s = c.to_toml().unwrap();
        let back = RunConfig::from_toml_str(&s).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        assert_eq!(c.hash().unwrap().len(), 16);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml_str("seed = 7\n[xua]\nlambda = 0.5\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.xua.lambda, 0.5);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.xua.lambda = 0.5;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml_str("[train]\nepochs = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[dmae]\nalpha = 1.5\n").is_err());
        assert!(RunConfig::from_toml_str("[xua]\nlambda = -1.0\n").is_err());
        assert!(RunConfig::from_toml_str("[train]\nbogus = 1\n").is_err());
        let mut c = RunConfig::default();
        assert!(c.apply(&Overrides { lambda: Some(f64::NAN), ..Default::default() }).is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut c = RunConfig::default();
        c.apply(&Overrides { seed: Some(3), lambda: Some(1.0), dmae: Some(false), xua: Some(false) }).unwrap();
        assert_eq!((c.seed, c.xua.lambda, c.dmae.enabled, c.xua.enabled), (3, 1.0, false, false));
    }
}
