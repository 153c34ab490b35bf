//! Typed configuration: a TOML file with one section per subsystem, plus
//! dotted-key overrides. Unknown keys are rejected.
//!
//! Field defaults are the full-scale values; the `desk` preset (the CLI
//! default) shrinks widths and step counts so everything runs in minutes on
//! a laptop CPU. The `sentiment` preset shows the configuration generality:
//! wider text features, seven classes, milder focal loss with optional
//! per-class weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentationPolicy, DatasetConfig, SyntheticConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TaskLossConfig, VaeConfig};
use crate::train::TrainConfig;

/// The full run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DatasetConfig,
    pub synthetic: SyntheticConfig,
    pub encoder: crate::model::EncoderConfig,
    pub vae: VaeConfig,
    pub diffusion: crate::model::DiffusionConfig,
    pub classifier: TaskLossConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Small-width profile: H = 32, d_z = 32, U-Net base 32, T = 200,
    /// batch 32, 40 epochs. This is the CLI default.
    pub fn desk() -> Self {
        let mut cfg = Config::default();
        cfg.encoder.hidden = 32;
        cfg.vae.latent = 32;
        cfg.diffusion.steps = 200;
        cfg.diffusion.base = 32;
        cfg.train.batch = 32;
        cfg.train.epochs = 40;
        cfg
    }

    /// Full-scale profile (the type-level defaults, spelled out).
    pub fn paper() -> Self {
        Config::default()
    }

    /// Seven-class sentiment preset: 768-wide text features, milder focal
    /// loss, optional per-class weights for the extreme classes.
    pub fn sentiment() -> Self {
        let mut cfg = Config::default();
        cfg.data.text_dim = 768;
        cfg.data.classes = 7;
        cfg.synthetic.proportions = vec![0.04, 0.08, 0.16, 0.34, 0.22, 0.12, 0.04];
        cfg.classifier.focal_gamma = 1.0;
        cfg.classifier.class_weights = Some(vec![4.88, 1.0, 1.0, 1.0, 1.0, 1.0, 5.95]);
        cfg
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Config::desk()),
            "paper" => Ok(Config::paper()),
            "sentiment" => Ok(Config::sentiment()),
            other => Err(Error::Usage(format!(
                "unknown preset '{other}' (expected desk, paper, or sentiment)"
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Config = toml::from_str(&text)
            .map_err(|e| Error::Usage(format!("config parse error in {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load order: explicit file if given, else preset (default `desk`),
    /// then dotted-key overrides applied on top.
    pub fn resolve(path: Option<&Path>, preset: Option<&str>, overrides: &[String]) -> Result<Self> {
        let base = match (path, preset) {
            (Some(p), _) => Config::load(p)?,
            (None, Some(name)) => Config::from_preset(name)?,
            (None, None) => Config::desk(),
        };
        let cfg = base.with_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `section.key=value` pairs. Values parse as TOML literals with a
    /// string fallback. Unknown keys are rejected during re-deserialization.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let text = toml::to_string(self).map_err(|e| Error::Config(format!("config encode: {e}")))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config re-parse: {e}")))?;
        for pair in overrides {
            let (key, raw) = pair
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override '{pair}' is not key=value")))?;
            let key = key.trim();
            let raw = raw.trim();
            let value: toml::Value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut parts: Vec<&str> = key.split('.').collect();
            let leaf = parts
                .pop()
                .ok_or_else(|| Error::Usage(format!("empty override key in '{pair}'")))?;
            let mut node = &mut table;
            for part in parts {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Usage(format!("'{part}' in '{key}' is not a section")))?;
            }
            node.insert(leaf.to_string(), value);
        }
        let merged: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Usage(format!("invalid override: {e}")))?;
        Ok(merged)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.synthetic.validate(&self.data)?;
        self.encoder.validate()?;
        self.diffusion.validate()?;
        self.classifier.validate(self.data.classes)?;
        self.train.validate()?;
        Ok(())
    }

    /// Assemble the architecture config consumed by the model builder.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            vae: self.vae.clone(),
            diffusion: self.diffusion.clone(),
            task: self.classifier.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }

    /// Augmentation policy lives inside the train section.
    pub fn augment(&self) -> &AugmentationPolicy {
        &self.train.augment
    }
}
