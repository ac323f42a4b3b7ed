use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, Normalization};
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossWeights};
use crate::network::ModelConfig;

/// Version of the configuration key schema.
pub const CONFIG_VERSION: u32 = 1;

/// Quantity watched by early stopping and best-checkpoint selection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    /// Overall dev loss with the pixel weight held at its initial value.
    #[default]
    DevLoss,
    /// Dev ACER at the dev equal-error threshold.
    DevAcer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Per-epoch multiplicative learning-rate factor.
    pub lr_decay_gamma: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_gamma: 0.995,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Frames sampled per video for every split.
    pub frames_per_video: usize,
    /// Oversample the minority class of the train split.
    pub balance: bool,
    pub normalization: Normalization,
    pub augment: AugmentConfig,
    pub eval_batch_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames_per_video: 10,
            balance: true,
            normalization: Normalization::default(),
            augment: AugmentConfig::default(),
            eval_batch_size: 64,
        }
    }
}

/// Complete description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub config_version: u32,
    pub seed: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub monitor: Monitor,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            seed: 0,
            batch_size: 32,
            max_epochs: 100,
            patience: 15,
            monitor: Monitor::DevLoss,
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            data: DataConfig::default(),
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return config_err(format!(
                "unsupported config_version {}, expected {CONFIG_VERSION}",
                self.config_version
            ));
        }
        let o = &self.optimizer;
        if !(o.lr0.is_finite() && o.lr0 > 0.0) {
            return config_err(format!("optimizer.lr0 must be positive, got {}", o.lr0));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return config_err(format!("optimizer.momentum must be in [0, 1), got {}", o.momentum));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return config_err(format!(
                "optimizer.weight_decay must be nonnegative, got {}",
                o.weight_decay
            ));
        }
        if !(o.lr_decay_gamma > 0.0 && o.lr_decay_gamma <= 1.0) {
            return config_err(format!(
                "optimizer.lr_decay_gamma must be in (0, 1], got {}",
                o.lr_decay_gamma
            ));
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("data.frames_per_video", self.data.frames_per_video),
            ("data.eval_batch_size", self.data.eval_batch_size),
        ] {
            if v == 0 {
                return config_err(format!("{key} must be positive"));
            }
        }
        let nested = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        nested(self.model.validate())?;
        nested(self.loss.validate())?;
        nested(self.data.normalization.validate())?;
        nested(self.data.augment.validate())?;
        Ok(())
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, &self.optimizer)
    }

    /// Applies `key.path=value` overrides. Values parse as TOML literals and
    /// fall back to bare strings; keys must name existing settings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut tree = toml::Table::try_from(self)
            .map_err(|e| Error::Config(format!("cannot serialise config: {e}")))?;
        for item in overrides {
            let Some((key, raw)) = item.split_once('=') else {
                return config_err(format!("override {item:?} is not key=value"));
            };
            let key = key.trim();
            set_path(&mut tree, key, parse_value(raw.trim()))?;
        }
        let cfg: TrainConfig = toml::Value::Table(tree.clone())
            .try_into()
            .map_err(|e| Error::Config(format!("override: {e}")))?;
        // Unknown keys deserialize silently; catch them by checking that every
        // override survives a round trip.
        let back = toml::Table::try_from(&cfg)
            .map_err(|e| Error::Config(format!("cannot serialise config: {e}")))?;
        for item in overrides {
            let key = item.split_once('=').map(|(k, _)| k.trim()).unwrap_or_default();
            if lookup(&back, key).is_none() {
                return config_err(format!("unknown config key {key:?}"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `lr0 * gamma^epoch`.
pub fn lr_at(epoch: usize, o: &OptimizerConfig) -> f64 {
    o.lr0 * o.lr_decay_gamma.powi(i32::try_from(epoch).unwrap_or(i32::MAX))
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(tree: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return config_err(format!("malformed config key {key:?}"));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = tree;
    for p in parents {
        table = match table.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return config_err(format!("unknown config section {p:?} in {key:?}")),
        };
    }
    // Integers given for float settings are widened.
    let value = match (table.get(*last), value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    table.insert((*last).to_string(), value);
    Ok(())
}

fn lookup<'a>(tree: &'a toml::Table, key: &str) -> Option<&'a toml::Value> {
    let mut parts = key.split('.');
    let mut value = tree.get(parts.next()?)?;
    for p in parts {
        value = value.as_table()?.get(p)?;
    }
    Some(value)
}

/// The four component ablations, from the single RGB stream up to the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// One RGB stream, no attention, cross-entropy on both heads.
    RgbBce,
    /// RGB and frequency streams fused at the heads, cross-entropy.
    RgbMfdBce,
    /// Both streams with attention taps, cross-entropy.
    FullBce,
    /// Both streams with attention, focal + smooth-L1 (the default config).
    FullFlsl,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::RgbBce, Preset::RgbMfdBce, Preset::FullBce, Preset::FullFlsl];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::RgbBce => "rgb_bce",
            Preset::RgbMfdBce => "rgb_mfd_bce",
            Preset::FullBce => "full_bce",
            Preset::FullFlsl => "full_flsl",
        }
    }

    /// `(use_mfd, use_ham, loss kind)`.
    pub fn flags(self) -> (bool, bool, LossKind) {
        match self {
            Preset::RgbBce => (false, false, LossKind::Bce),
            Preset::RgbMfdBce => (true, false, LossKind::Bce),
            Preset::FullBce => (true, true, LossKind::Bce),
            Preset::FullFlsl => (true, true, LossKind::FocalSl),
        }
    }

    /// `base` with this preset's component flags.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let (use_mfd, use_ham, kind) = self.flags();
        let mut cfg = base.clone();
        cfg.model.use_mfd = use_mfd;
        cfg.model.use_ham = use_ham;
        cfg.loss.kind = kind;
        cfg
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
