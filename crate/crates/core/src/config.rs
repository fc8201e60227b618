//! Flat `key = value` run configuration.
//!
//! Every key has an embedded default. A config file overrides defaults and
//! environment variables named `RAGAN_<KEY>` (key upper-cased) override the
//! file. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{LossWeights, OptimizerConfig, IMAGE_SIZE, STYLE_ROWS};
use crate::error::{RaganError, Result};

pub const ENV_PREFIX: &str = "RAGAN_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMode {
    /// Forward-phase gradients stepped by the forward preset, cycle-phase
    /// gradients by the reconstruction preset, one after the other.
    Dual,
    /// Both phases summed and stepped once by the reconstruction preset.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeSampling {
    PerImage,
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    pub image_size: usize,
    pub batch_size: usize,
    pub loss: LossWeights,
    pub forward: OptimizerConfig,
    pub reconstruction: OptimizerConfig,
    pub optimizer_mode: OptimizerMode,
    pub target_age_sampling: AgeSampling,
    pub target_age_min: f64,
    pub target_age_max: f64,
    pub generator_frozen: bool,
    pub noise_seed: u64,
    pub noise_strength: f64,
    pub race_taps: [usize; 3],
    pub pyramid_taps: [usize; 3],
    pub head_rows: [usize; 3],
    pub face_channels: usize,
    pub fusion_channels: usize,
    pub age_encoder_width: usize,
    pub checkpoint_every: u64,
    pub toy_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: IMAGE_SIZE,
            batch_size: 4,
            loss: LossWeights::default(),
            forward: OptimizerConfig::forward_phase(),
            reconstruction: OptimizerConfig::reconstruction_phase(),
            optimizer_mode: OptimizerMode::Dual,
            target_age_sampling: AgeSampling::PerImage,
            target_age_min: 10.0,
            target_age_max: 80.0,
            generator_frozen: true,
            noise_seed: 0,
            noise_strength: 0.0,
            race_taps: [7, 13, 15],
            pyramid_taps: [1, 2, 3],
            head_rows: [3, 4, 11],
            face_channels: 16,
            fusion_channels: 16,
            age_encoder_width: 16,
            checkpoint_every: 100,
            toy_seed: 1234,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "image_size",
    "batch_size",
    "lambda_l2",
    "lambda_id",
    "lambda_w_norm",
    "lambda_aging",
    "lambda_race",
    "forward_learning_rate",
    "forward_beta1",
    "forward_beta2",
    "forward_weight_decay",
    "reconstruction_learning_rate",
    "reconstruction_beta1",
    "reconstruction_beta2",
    "reconstruction_weight_decay",
    "optimizer_mode",
    "target_age_sampling",
    "target_age_min",
    "target_age_max",
    "generator_frozen",
    "noise_seed",
    "noise_strength",
    "race_taps",
    "pyramid_taps",
    "head_rows",
    "face_channels",
    "fusion_channels",
    "age_encoder_width",
    "checkpoint_every",
    "toy_seed",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| RaganError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_triple(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| parse(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| RaganError::Config(format!("`{key}` needs three comma-separated integers")))
}

fn triple(v: [usize; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

impl Config {
    /// Defaults overridden by `path` (if given), then by the environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| RaganError::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                RaganError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(RaganError::Config(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
            self.set(key, value.trim())?;
        }
        Ok(())
    }

    /// Applies `RAGAN_*` variables from `vars`; unrelated variables are ignored.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let mut found: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let key = k.strip_prefix(ENV_PREFIX)?.to_ascii_lowercase();
                KEYS.contains(&key.as_str()).then_some((key, v))
            })
            .collect();
        found.sort();
        for (k, v) in found {
            self.set(&k, v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lambda_l2" => self.loss.lambda_l2 = parse(key, value)?,
            "lambda_id" => self.loss.lambda_id = parse(key, value)?,
            "lambda_w_norm" => self.loss.lambda_w_norm = parse(key, value)?,
            "lambda_aging" => self.loss.lambda_aging = parse(key, value)?,
            "lambda_race" => self.loss.lambda_race = parse(key, value)?,
            "forward_learning_rate" => self.forward.learning_rate = parse(key, value)?,
            "forward_beta1" => self.forward.beta1 = parse(key, value)?,
            "forward_beta2" => self.forward.beta2 = parse(key, value)?,
            "forward_weight_decay" => self.forward.weight_decay = parse(key, value)?,
            "reconstruction_learning_rate" => {
                self.reconstruction.learning_rate = parse(key, value)?
            }
            "reconstruction_beta1" => self.reconstruction.beta1 = parse(key, value)?,
            "reconstruction_beta2" => self.reconstruction.beta2 = parse(key, value)?,
            "reconstruction_weight_decay" => self.reconstruction.weight_decay = parse(key, value)?,
            "optimizer_mode" => {
                self.optimizer_mode = match value {
                    "dual" => OptimizerMode::Dual,
                    "single" => OptimizerMode::Single,
                    _ => {
                        return Err(RaganError::Config(format!(
                            "optimizer_mode must be dual|single, got `{value}`"
                        )))
                    }
                }
            }
            "target_age_sampling" => {
                self.target_age_sampling = match value {
                    "per_image" => AgeSampling::PerImage,
                    "per_batch" => AgeSampling::PerBatch,
                    _ => {
                        return Err(RaganError::Config(format!(
                            "target_age_sampling must be per_image|per_batch, got `{value}`"
                        )))
                    }
                }
            }
            "target_age_min" => self.target_age_min = parse(key, value)?,
            "target_age_max" => self.target_age_max = parse(key, value)?,
            "generator_frozen" => self.generator_frozen = parse(key, value)?,
            "noise_seed" => self.noise_seed = parse(key, value)?,
            "noise_strength" => self.noise_strength = parse(key, value)?,
            "race_taps" => self.race_taps = parse_triple(key, value)?,
            "pyramid_taps" => self.pyramid_taps = parse_triple(key, value)?,
            "head_rows" => self.head_rows = parse_triple(key, value)?,
            "face_channels" => self.face_channels = parse(key, value)?,
            "fusion_channels" => self.fusion_channels = parse(key, value)?,
            "age_encoder_width" => self.age_encoder_width = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "toy_seed" => self.toy_seed = parse(key, value)?,
            _ => return Err(RaganError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let mode = |m: OptimizerMode| match m {
            OptimizerMode::Dual => "dual",
            OptimizerMode::Single => "single",
        };
        let sampling = |s: AgeSampling| match s {
            AgeSampling::PerImage => "per_image",
            AgeSampling::PerBatch => "per_batch",
        };
        Some(match key {
            "seed" => self.seed.to_string(),
            "image_size" => self.image_size.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lambda_l2" => self.loss.lambda_l2.to_string(),
            "lambda_id" => self.loss.lambda_id.to_string(),
            "lambda_w_norm" => self.loss.lambda_w_norm.to_string(),
            "lambda_aging" => self.loss.lambda_aging.to_string(),
            "lambda_race" => self.loss.lambda_race.to_string(),
            "forward_learning_rate" => self.forward.learning_rate.to_string(),
            "forward_beta1" => self.forward.beta1.to_string(),
            "forward_beta2" => self.forward.beta2.to_string(),
            "forward_weight_decay" => self.forward.weight_decay.to_string(),
            "reconstruction_learning_rate" => self.reconstruction.learning_rate.to_string(),
            "reconstruction_beta1" => self.reconstruction.beta1.to_string(),
            "reconstruction_beta2" => self.reconstruction.beta2.to_string(),
            "reconstruction_weight_decay" => self.reconstruction.weight_decay.to_string(),
            "optimizer_mode" => mode(self.optimizer_mode).to_string(),
            "target_age_sampling" => sampling(self.target_age_sampling).to_string(),
            "target_age_min" => self.target_age_min.to_string(),
            "target_age_max" => self.target_age_max.to_string(),
            "generator_frozen" => self.generator_frozen.to_string(),
            "noise_seed" => self.noise_seed.to_string(),
            "noise_strength" => self.noise_strength.to_string(),
            "race_taps" => triple(self.race_taps),
            "pyramid_taps" => triple(self.pyramid_taps),
            "head_rows" => triple(self.head_rows),
            "face_channels" => self.face_channels.to_string(),
            "fusion_channels" => self.fusion_channels.to_string(),
            "age_encoder_width" => self.age_encoder_width.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "toy_seed" => self.toy_seed.to_string(),
            _ => return None,
        })
    }

    /// Every key in [`KEYS`] order, one `key = value` per line. Parsing the
    /// result reproduces `self`.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// Hex SHA-256 of [`Config::canonical`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(RaganError::Config(m));
        if self.image_size != IMAGE_SIZE {
            return err(format!(
                "image_size must be {IMAGE_SIZE}, got {}",
                self.image_size
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        self.loss.validate()?;
        self.forward.validate()?;
        self.reconstruction.validate()?;
        if !(self.target_age_min > 0.0
            && self.target_age_min <= self.target_age_max
            && self.target_age_max <= 120.0)
        {
            return err(format!(
                "target age range [{}, {}] must satisfy 0 < min <= max <= 120",
                self.target_age_min, self.target_age_max
            ));
        }
        if self.target_age_min.ceil() > self.target_age_max.floor() {
            return err("target age range contains no integer".into());
        }
        if self.head_rows.iter().sum::<usize>() != STYLE_ROWS || self.head_rows.contains(&0) {
            return err(format!(
                "head_rows {:?} must be positive and sum to {STYLE_ROWS}",
                self.head_rows
            ));
        }
        if !self.noise_strength.is_finite() || self.noise_strength < 0.0 {
            return err("noise_strength must be finite and >= 0".into());
        }
        if self.face_channels == 0 || self.fusion_channels == 0 || self.age_encoder_width == 0 {
            return err("channel widths must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(Config::from_text(&cfg.canonical()).unwrap(), cfg);
    }

    #[test]
    fn file_overrides_defaults() {
        let cfg = Config::from_text(
            "# comment\nseed = 7\nlambda_race = 2.5 # trailing\n\nhead_rows = 4, 4, 10\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.loss.lambda_race, 2.5);
        assert_eq!(cfg.head_rows, [4, 4, 10]);
        assert_eq!(cfg.loss.lambda_l2, 0.25);
    }

    #[test]
    fn env_overrides_file() {
        let mut cfg = Config::from_text("seed = 7").unwrap();
        cfg.apply_env([
            ("RAGAN_SEED".to_string(), "9".to_string()),
            ("RAGAN_OPTIMIZER_MODE".to_string(), "single".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ])
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.optimizer_mode, OptimizerMode::Single);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Config::from_text("nonsense = 1").is_err());
        assert!(Config::from_text("seed = x").is_err());
        assert!(Config::from_text("seed 1").is_err());
        assert!(Config::from_text("seed = 1\nseed = 2").is_err());
        assert!(Config::from_text("image_size = 128").is_err());
        assert!(Config::from_text("head_rows = 3,4,10").is_err());
        assert!(Config::from_text("forward_beta1 = 1.0").is_err());
        assert!(Config::from_text("target_age_min = 81").is_err());
        assert!(Config::from_text("lambda_id = -1").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
