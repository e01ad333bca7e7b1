//! Layered run configuration: defaults, then the TOML config file, then
//! command-line overrides in `--section.key` form.

use std::path::Path;

use phynow_core::error::{Error, Result};
use phynow_core::phydnet::ModelConfig;
use phynow_core::training::TrainConfig;
use serde::Deserialize;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Option<String>,
    pub k: Option<usize>,
    pub latent_channels: Option<usize>,
    pub tau_in: Option<usize>,
    pub tau_out: Option<usize>,
    pub delta_minutes: Option<i64>,
    pub icloss: Option<bool>,
    pub residual: Option<bool>,
    pub convlstm_widths: Option<Vec<usize>>,
    pub severe_threshold_dbz: Option<f64>,
    pub class_weight: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub lambda_moment: Option<f64>,
    pub teacher_forcing: Option<bool>,
    pub device: Option<String>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub ratios: Option<Vec<f64>>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub thresholds_dbz: Option<Vec<f64>>,
    pub tau_out: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))
            }
        }
    }
}

/// `--model.*` command-line overrides; `None` falls through to the file.
#[derive(Debug, Clone, clap::Args, Default)]
pub struct ModelFlags {
    #[arg(long = "model.variant", value_name = "baseline|quad|advdiff")]
    pub variant: Option<String>,
    #[arg(long = "model.k")]
    pub k: Option<usize>,
    #[arg(long = "model.latent_channels")]
    pub latent_channels: Option<usize>,
    #[arg(long = "model.tau_in")]
    pub tau_in: Option<usize>,
    #[arg(long = "model.tau_out")]
    pub tau_out: Option<usize>,
    #[arg(long = "model.delta_minutes")]
    pub delta_minutes: Option<i64>,
    #[arg(long = "model.icloss")]
    pub icloss: Option<bool>,
    #[arg(long = "model.residual")]
    pub residual: Option<bool>,
    #[arg(long = "model.convlstm_widths", value_delimiter = ',')]
    pub convlstm_widths: Option<Vec<usize>>,
    #[arg(long = "model.severe_threshold_dbz")]
    pub severe_threshold_dbz: Option<f64>,
    #[arg(long = "model.class_weight")]
    pub class_weight: Option<f64>,
}

#[derive(Debug, Clone, clap::Args, Default)]
pub struct TrainFlags {
    #[arg(long = "train.learning_rate")]
    pub learning_rate: Option<f64>,
    #[arg(long = "train.epochs")]
    pub epochs: Option<usize>,
    #[arg(long = "train.batch_size")]
    pub batch_size: Option<usize>,
    #[arg(long = "train.seed")]
    pub seed: Option<u64>,
    #[arg(long = "train.lambda_moment")]
    pub lambda_moment: Option<f64>,
    #[arg(long = "train.teacher_forcing")]
    pub teacher_forcing: Option<bool>,
    #[arg(long = "train.device")]
    pub device: Option<String>,
}

pub fn resolve_model_config(file: &FileConfig, flags: &ModelFlags) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    let section = &file.model;
    if let Some(v) = flags.variant.as_ref().or(section.variant.as_ref()) {
        cfg.variant = v.parse()?;
        cfg.k = cfg.variant.kernel_size();
    }
    if let Some(k) = flags.k.or(section.k) {
        cfg.k = k;
    }
    if let Some(v) = flags.latent_channels.or(section.latent_channels) {
        cfg.latent_channels = v;
    }
    if let Some(v) = flags.tau_in.or(section.tau_in) {
        cfg.tau_in = v;
    }
    if let Some(v) = flags.tau_out.or(section.tau_out) {
        cfg.tau_out = v;
    }
    if let Some(v) = flags.delta_minutes.or(section.delta_minutes) {
        cfg.delta_minutes = v;
    }
    if let Some(v) = flags.icloss.or(section.icloss) {
        cfg.icloss_enabled = v;
    }
    if let Some(v) = flags.residual.or(section.residual) {
        cfg.residual_enabled = v;
    }
    if let Some(v) = flags.convlstm_widths.clone().or(section.convlstm_widths.clone()) {
        cfg.convlstm_widths = v;
    }
    if let Some(v) = flags.severe_threshold_dbz.or(section.severe_threshold_dbz) {
        cfg.severe_threshold_dbz = v;
    }
    if let Some(v) = flags.class_weight.or(section.class_weight) {
        cfg.class_weight = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve_train_config(file: &FileConfig, flags: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let section = &file.train;
    if let Some(v) = flags.learning_rate.or(section.learning_rate) {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.epochs.or(section.epochs) {
        cfg.epochs = v;
    }
    if let Some(v) = flags.batch_size.or(section.batch_size) {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.seed.or(section.seed) {
        cfg.seed = v;
    }
    if let Some(v) = flags.lambda_moment.or(section.lambda_moment) {
        cfg.lambda_moment = v;
    }
    if let Some(v) = flags.teacher_forcing.or(section.teacher_forcing) {
        cfg.teacher_forcing = v;
    }
    if let Some(v) = flags.device.clone().or(section.device.clone()) {
        cfg.device = Some(v);
    }
    cfg.validate()?;
    Ok(cfg)
}
