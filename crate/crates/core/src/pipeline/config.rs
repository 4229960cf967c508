//! Run configuration with TOML (dotted-key) loading and presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{parse_synth_list, SynthSpec};
use crate::decoder::LossWeights;
use crate::error::{io_err, Error, Result};
use crate::model::ModelConfig;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "STGLOW_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub epochs: usize,
    /// Behaviors sampled per target for the best-of-K loss.
    pub k: usize,
    pub loss: LossWeights,
    /// Share of training windows held out to pick the best checkpoint.
    pub validation_fraction: f64,
    /// Write the rolling checkpoint every this many epochs (0: only at the
    /// end).
    pub checkpoint_every: usize,
    /// Global gradient-norm ceiling (0: no clipping).
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 128,
            lr: 1e-3,
            betas: (0.9, 0.999),
            weight_decay: 1e-6,
            epochs: 400,
            k: 20,
            loss: LossWeights::default(),
            validation_fraction: 0.1,
            checkpoint_every: 1,
            grad_clip: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub sigma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 20, sigma: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    EthUcy,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    /// One file per scene; the file stem names the scene.
    pub paths: Vec<PathBuf>,
    /// Scene held out of training (leave-one-out protocol).
    pub holdout: Option<String>,
    /// Synthetic scenes, e.g. `straight=32,turn=32;seed=7;noise=0.02`.
    pub synth: String,
    /// Window advance in annotation steps.
    pub stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: DataFormat::Synthetic,
            paths: Vec::new(),
            holdout: None,
            synth: "straight=32,turn=32;seed=1;noise=0".into(),
            stride: 1,
        }
    }
}

impl DataConfig {
    /// Synthetic spec with the model's window lengths applied.
    pub fn synth_spec(&self, t_o: usize, t_p: usize) -> Result<SynthSpec> {
        let mut spec = parse_synth_list(&self.synth)?;
        spec.t_o = t_o;
        spec.t_p = t_p;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Name of the preset the file was layered on, if any.
    pub preset: Option<String>,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            preset: None,
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl Config {
    /// Desk-scale setup on synthetic straight and turning walkers.
    pub fn toy() -> Self {
        let mut c = Self {
            preset: Some("toy".into()),
            ..Self::default()
        };
        c.model.encoder.width = 32;
        c.model.flow.channels = 32;
        c.model.flow.coupling_hidden = 32;
        c.model.flow.steps = 4;
        c.model.flow.factor_out = false;
        c.model.decoder.hidden = 32;
        c.train.batch = 8;
        c.train.lr = 3e-3;
        c.train.grad_clip = 1.0;
        c.train.epochs = 50;
        c.data = DataConfig {
            format: DataFormat::Synthetic,
            synth: "straight=32,turn=32;seed=1;noise=0".into(),
            ..DataConfig::default()
        };
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" | "default" => Ok(Self::default()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::Config(format!("unknown preset `{name}`"))),
        }
    }

    /// Parses TOML; a top-level `preset` key selects the base the remaining
    /// keys are layered on.
    pub fn from_toml(text: &str) -> Result<Self> {
        let overrides: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let base = match overrides.get("preset") {
            Some(toml::Value::String(name)) => Self::preset(name)?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => Self::default(),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overrides);
        let config: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `STGLOW_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.loss.validate()?;
        let t = &self.train;
        if t.batch == 0 || t.k == 0 {
            return Err(Error::Config("train.batch and train.k must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(0.0..1.0).contains(&t.betas.0) || !(0.0..1.0).contains(&t.betas.1) {
            return Err(Error::Config("learning rate must be positive and betas in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&t.validation_fraction) || !(t.weight_decay >= 0.0) || !(t.grad_clip >= 0.0) {
            return Err(Error::Config(
                "validation_fraction must be in [0, 1), weight_decay and grad_clip >= 0".into(),
            ));
        }
        if self.eval.k == 0 || !(self.eval.sigma >= 0.0) {
            return Err(Error::Config("eval.k must be positive and eval.sigma nonnegative".into()));
        }
        if self.data.stride == 0 {
            return Err(Error::Config("data.stride must be positive".into()));
        }
        match self.data.format {
            DataFormat::Synthetic => {
                self.data.synth_spec(self.model.t_o, self.model.t_p)?;
            }
            DataFormat::EthUcy if self.data.paths.is_empty() => {
                return Err(Error::Config("eth_ucy data needs at least one path".into()));
            }
            DataFormat::EthUcy => {}
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let c = Config::default();
        assert_eq!(c.model.encoder.width, 256);
        assert_eq!(c.model.encoder.heads, 4);
        assert_eq!(c.model.flow.steps, 16);
        assert!(c.model.flow.factor_out);
        assert_eq!(c.model.decoder.hidden, 256);
        assert_eq!((c.model.t_o, c.model.t_p), (8, 12));
        assert_eq!(c.train.batch, 128);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.betas, (0.9, 0.999));
        assert_eq!(c.train.weight_decay, 1e-6);
        assert_eq!(c.train.epochs, 400);
        assert_eq!(c.train.k, 20);
        assert_eq!(c.eval.k, 20);
        assert_eq!(c.eval.sigma, 1.0);
        c.validate().unwrap();
    }

    #[test]
    fn dotted_keys_layer_on_preset() {
        let c = Config::from_toml("preset = \"toy\"\nseed = 9\nmodel.flow.steps = 2\ntrain.loss.alpha = 0.5\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.flow.steps, 2);
        assert_eq!(c.model.encoder.width, 32);
        assert_eq!(c.train.loss.alpha, 0.5);
        assert_eq!(c.train.loss.lambda3, 0.5);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = Config::toy();
        assert_eq!(Config::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_toml("model.encoder.width = 30\n").is_err());
        assert!(Config::from_toml("train.lr = -1.0\n").is_err());
        assert!(Config::from_toml("nonsense = 1\n").is_err());
        assert!(Config::from_toml("preset = \"huge\"\n").is_err());
        assert!(Config::from_toml("data.synth = \"walk=3\"\n").is_err());
    }
}
