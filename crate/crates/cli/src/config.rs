//! Run configuration read from TOML (or from a previous run's manifest) and
//! overridden by command-line flags.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use soundtriage::dataio::{FeatureConfig, SynthConfig};
use soundtriage::inference::{MetricKind, TuningGrid};
use soundtriage::model::ModelConfig;
use soundtriage::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSettings,
    pub features: FeatureConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub tuning: TuningSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthSettings::default(),
            features: FeatureConfig::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            tuning: TuningSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub clips: usize,
    pub classes: usize,
    pub duration: f64,
    pub sample_rate: u32,
    pub max_events: usize,
    pub min_event_len: f64,
    pub max_event_len: f64,
    pub noise_std: f64,
    pub level_db: (f64, f64),
    pub class_gain_db: Vec<f64>,
    pub class_prevalence: Vec<f64>,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let base = SynthConfig::new(200, 5, 10.0, 0);
        Self {
            clips: base.n_clips,
            classes: base.n_classes,
            duration: base.duration,
            sample_rate: base.sample_rate,
            max_events: base.max_events,
            min_event_len: base.min_event_len,
            max_event_len: base.max_event_len,
            noise_std: base.noise_std,
            level_db: base.level_db,
            class_gain_db: base.class_gain_db,
            class_prevalence: base.class_prevalence,
        }
    }
}

impl SynthSettings {
    pub fn to_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_clips: self.clips,
            n_classes: self.classes,
            duration: self.duration,
            seed,
            sample_rate: self.sample_rate,
            max_events: self.max_events,
            min_event_len: self.min_event_len,
            max_event_len: self.max_event_len,
            noise_std: self.noise_std,
            level_db: self.level_db,
            class_gain_db: self.class_gain_db.clone(),
            class_prevalence: self.class_prevalence.clone(),
        }
    }
}

/// Architecture sizes; mel bands and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub cnn_channels: Vec<usize>,
    pub time_pooling: Vec<usize>,
    pub gru_units: usize,
    pub fc_units: usize,
    pub conditioner_hidden: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let base = ModelConfig::new(64, 2);
        Self {
            cnn_channels: base.backbone.cnn_channels,
            time_pooling: base.backbone.time_pooling,
            gru_units: base.backbone.gru_units,
            fc_units: base.backbone.fc_units,
            conditioner_hidden: base.conditioner.hidden_dims,
            leaky_slope: base.backbone.leaky_slope,
        }
    }
}

impl ModelSettings {
    pub fn to_config(&self, n_mels: usize, n_classes: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(n_mels, n_classes);
        cfg.backbone.cnn_channels = self.cnn_channels.clone();
        cfg.backbone.time_pooling = self.time_pooling.clone();
        cfg.backbone.gru_units = self.gru_units;
        cfg.backbone.fc_units = self.fc_units;
        cfg.backbone.leaky_slope = self.leaky_slope;
        cfg.conditioner.hidden_dims = self.conditioner_hidden.clone();
        cfg.conditioner.leaky_slope = self.leaky_slope;
        cfg.conditioner.output_dim = self.cnn_channels.first().copied().unwrap_or(0);
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningSettings {
    pub metric: MetricKind,
    pub thresholds: Vec<f64>,
    pub median_sizes: Vec<usize>,
    pub target_weights: Vec<f64>,
}

impl Default for TuningSettings {
    fn default() -> Self {
        let grid = TuningGrid::default();
        Self {
            metric: MetricKind::Frame,
            thresholds: grid.thresholds,
            median_sizes: grid.median_sizes,
            target_weights: grid.target_weights,
        }
    }
}

impl TuningSettings {
    pub fn grid(&self) -> TuningGrid {
        TuningGrid {
            thresholds: self.thresholds.clone(),
            median_sizes: self.median_sizes.clone(),
            target_weights: self.target_weights.clone(),
        }
    }
}

/// Reads a TOML config, or the `config` field of a `manifest.json`.
pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        #[derive(Deserialize)]
        struct ManifestConfig {
            config: RunConfig,
        }
        let m: ManifestConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        return Ok(m.config);
    }
    match toml::from_str(&text) {
        Ok(cfg) => Ok(cfg),
        Err(e) => bail!("parsing config {}: {e}", path.display()),
    }
}
